import hashlib
import json
import os

import pytest

from flowfront.cli import build_parser, main


def _tree_digest(root):
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = os.path.join(dirpath, name)
            h.update(os.path.relpath(p, root).encode())
            with open(p, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for name in ("gen-data", "pretrain-flow", "train", "eval", "visualize"):
        assert name in out


@pytest.mark.parametrize(
    "cmd,flags",
    [
        ("gen-data", ["--out", "--identities", "--seed", "--resolution"]),
        ("pretrain-flow", ["--config", "--data", "--ckpt", "--out"]),
        ("train", ["--config", "--data", "--ckpt", "--out"]),
        ("eval", ["--config", "--data", "--ckpt", "--out"]),
        ("visualize", ["--config", "--data", "--ckpt", "--out", "--samples"]),
    ],
)
def test_subcommand_flags(capsys, cmd, flags):
    with pytest.raises(SystemExit):
        main([cmd, "--help"])
    out = capsys.readouterr().out
    for flag in flags:
        assert flag in out


def test_gen_data_is_byte_stable(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["gen-data", "--out", a, "--identities", "3",
                 "--seed", "4", "--resolution", "32"]) == 0
    assert main(["gen-data", "--out", b, "--identities", "3",
                 "--seed", "4", "--resolution", "32"]) == 0
    assert _tree_digest(a) == _tree_digest(b)
    with open(os.path.join(a, "manifest.json")) as fh:
        man = json.load(fh)
    assert man["resolution"] == 32
    assert os.path.isdir(os.path.join(a, "images"))


def test_gen_data_rejects_single_identity(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--out", str(tmp_path / "x"), "--identities", "1"])
    assert exc.value.code == 2


def test_missing_inputs_exit_one(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "missing file" in err and "manifest.json" in err

    # data present but checkpoint path bogus
    data = str(tmp_path / "d")
    assert main(["gen-data", "--out", data, "--identities", "3",
                 "--seed", "0", "--resolution", "32"]) == 0
    rc = main(["train", "--data", data, "--ckpt", str(tmp_path / "no.ckpt"),
               "--out", str(tmp_path / "o2")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "no.ckpt" in err


def test_end_to_end_tiny_run(tmp_path, capsys):
    data = str(tmp_path / "data")
    assert main(["gen-data", "--out", data, "--identities", "3",
                 "--seed", "6", "--resolution", "32"]) == 0
    capsys.readouterr()

    cfg_path = str(tmp_path / "tiny.cfg")
    with open(cfg_path, "w") as fh:
        fh.write(
            "total_steps = 2\n"
            "embed_steps = 2\n"
            "pretrain_epochs = 1\n"
            "checkpoint_every = 2\n"
            "sample_every = 2\n"
            "batch_size = 2\n"
        )

    run = str(tmp_path / "run")
    assert main(["train", "--config", cfg_path, "--data", data, "--out", run]) == 0
    printed = capsys.readouterr().out.strip()
    assert printed.endswith("step_00000002.ckpt")
    assert os.path.isfile(printed)

    ev = str(tmp_path / "ev")
    assert main(["eval", "--data", data, "--ckpt", printed, "--out", ev]) == 0
    table = capsys.readouterr().out
    assert "Method" in table and "frontalized" in table
    assert os.path.isfile(os.path.join(ev, "report.json"))
    assert os.path.isfile(os.path.join(ev, "report.txt"))
    with open(os.path.join(ev, "report.json")) as fh:
        payload = json.load(fh)
    assert "rank1_frontalized" in payload and "verification_auc" in payload

    viz = str(tmp_path / "viz")
    assert main(["visualize", "--data", data, "--ckpt", printed,
                 "--out", viz, "--samples", "2"]) == 0
    listed = capsys.readouterr().out.split()
    assert len(listed) == 6
    assert all(os.path.isfile(f) for f in listed)


def test_pretrain_flow_writes_checkpoint(tmp_path, capsys):
    data = str(tmp_path / "data")
    assert main(["gen-data", "--out", data, "--identities", "2",
                 "--seed", "1", "--resolution", "32"]) == 0
    cfg_path = str(tmp_path / "p.cfg")
    with open(cfg_path, "w") as fh:
        fh.write("pretrain_epochs = 1\n")
    out = str(tmp_path / "pre")
    assert main(["pretrain-flow", "--config", cfg_path,
                 "--data", data, "--out", out]) == 0
    printed = capsys.readouterr().out.strip().splitlines()[-1]
    assert printed.endswith("flow_pretrain.ckpt")
    assert os.path.isfile(printed)


def test_parser_prog_name():
    assert build_parser().prog == "flowfront"
