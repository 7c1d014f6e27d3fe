import numpy as np
import pytest

from mspe.checkpoint import load_checkpoint
from mspe.cli import COMMANDS, build_parser, main, parse_args, read_config, UsageError
from mspe.train import TrainConfig

TINY = ["--dim", "8", "--depth", "1", "--heads", "2", "--samples-per-class", "4", "--epochs", "1",
        "--batch-size", "8"]


def subparsers():
    return build_parser()._subparsers._group_actions[0].choices


@pytest.mark.parametrize("cmd", sorted(COMMANDS))
def test_help_lists_every_flag(cmd, capsys):
    assert main([cmd, "--help"]) == 0
    text = capsys.readouterr().out
    flags = [s for a in subparsers()[cmd]._actions for s in a.option_strings]
    assert "--config" in flags
    for flag in flags:
        assert flag in text, flag


def test_config_grammar(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\n\nlr = 0.5  # trailing\n--batch-size=3\nweight_decay=0\n")
    assert read_config(p) == {"lr": "0.5", "batch_size": "3", "weight_decay": "0"}
    p.write_text("no equals sign\n")
    with pytest.raises(UsageError):
        read_config(p)


def test_config_precedence_three_way(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("lr=0.2\nepochs=3\nseed=9\n")
    ns = parse_args(["pretrain", "--config", str(cfg), "--out", "x", "--epochs", "7"])
    assert ns.epochs == 7  # flag beats file
    assert ns.lr == 0.2  # file beats default
    assert ns.momentum == TrainConfig().momentum  # default
    assert ns.seed == 9


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("nonsense=1\n")
    assert main(["inspect-resize", "--src", "2", "--dst", "4", "--config", str(cfg)]) == 2
    assert "nonsense" in capsys.readouterr().err


def test_missing_config_file(capsys):
    assert main(["inspect-resize", "--src", "2", "--dst", "4", "--config", "/nonexistent/c.cfg"]) == 2


def test_missing_seed_exits_2(tmp_path, capsys):
    code = main(["mspe-train", "--checkpoint", str(tmp_path / "a"), "--out", str(tmp_path / "b")])
    err = capsys.readouterr().err
    assert code == 2
    assert err.startswith("mspe: error: usage:") and "--seed" in err
    assert err.count("\n") == 1


def test_unknown_flag_exits_2(capsys):
    assert main(["eval", "--seed", "0", "--checkpoint", "x", "--frobnicate"]) == 2
    assert "frobnicate" in capsys.readouterr().err


def test_missing_checkpoint_exits_2(tmp_path, capsys):
    code = main(["eval", "--seed", "0", "--checkpoint", str(tmp_path / "none.ckpt"), "--square", "16:32:16"])
    assert code == 2
    assert "checkpoint not found" in capsys.readouterr().err


def test_inspect_resize_bilinear(capsys):
    assert main(["inspect-resize", "--src", "2", "--dst", "4", "--method", "bilinear"]) == 0
    rows = [[float(v) for v in line.split(",")] for line in capsys.readouterr().out.splitlines()]
    assert rows == [[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]]


def test_bad_range_is_usage_error(capsys):
    assert main(["eval", "--seed", "0", "--checkpoint", "x", "--square", "16:8"]) == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["pretrain", "--seed", "1", "--out", str(d / "pre.ckpt"), *TINY]) == 0
    assert main(["mspe-train", "--seed", "1", "--checkpoint", str(d / "pre.ckpt"), "--out", str(d / "mspe.ckpt"),
                 "--samples-per-class", "4", "--epochs", "1", "--batch-size", "8",
                 "--history", str(d / "hist.csv")]) == 0
    return d


def test_mspe_train_keeps_encoder_and_writes_history(trained):
    pre, post = load_checkpoint(trained / "pre.ckpt"), load_checkpoint(trained / "mspe.ckpt")
    for name in pre:
        if name.startswith("vit."):
            assert pre[name].tobytes() == post[name].tobytes()
    assert "bank.kernel.3" in post and "bank.kernel.0" not in pre
    assert (trained / "hist.csv").read_text().splitlines()[0] == "epoch,step,term,value"


def test_eval_square_sweep_rows(trained, capsys):
    out = trained / "eval.csv"
    assert main(["eval", "--seed", "2", "--checkpoint", str(trained / "mspe.ckpt"), "--modes", "mspe",
                 "--square", "16:64:16", "--samples-per-class", "3", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "mode,height,width,top1,loss,n"
    assert [line.split(",")[:3] for line in lines[1:]] == [["mspe", str(r), str(r)] for r in (16, 32, 48, 64)]


def test_eval_aspect_sweep_to_stdout(trained, capsys):
    assert main(["eval", "--seed", "2", "--checkpoint", str(trained / "mspe.ckpt"), "--modes", "vanilla,flexivit",
                 "--fixed-height", "32", "--widths", "16:48:16", "--samples-per-class", "2"]) == 0
    rows = capsys.readouterr().out.splitlines()[1:]
    assert [tuple(r.split(",")[:3]) for r in rows] == [
        (m, "32", str(w)) for m in ("vanilla_resize", "flexivit") for w in (16, 32, 48)]


def test_eval_mspe_without_bank_records_failure(trained, capsys):
    assert main(["eval", "--seed", "0", "--checkpoint", str(trained / "pre.ckpt"), "--modes", "mspe",
                 "--square", "32:32:1", "--samples-per-class", "2"]) == 0
    assert capsys.readouterr().out.splitlines()[1] == "mspe,32,32,nan,nan,0"


def test_gen_data_then_eval_on_idx(trained, tmp_path):
    assert main(["gen-data", "--seed", "3", "--out-dir", str(tmp_path), "--samples-per-class", "2",
                 "--resolution", "24"]) == 0
    out = tmp_path / "eval.csv"
    assert main(["eval", "--seed", "3", "--checkpoint", str(trained / "mspe.ckpt"), "--square", "24:24:1",
                 "--data", str(tmp_path / "images.idx"), "--labels", str(tmp_path / "labels.idx"),
                 "--out", str(out)]) == 0
    rows = out.read_text().splitlines()[1:]
    assert len(rows) == 3 and all(r.endswith(",8") for r in rows)


def test_diag_sim_writes_csvs(trained, tmp_path):
    assert main(["diag-sim", "--seed", "0", "--checkpoint", str(trained / "mspe.ckpt"), "--samples", "5",
                 "--samples-per-class", "2", "--out-dir", str(tmp_path)]) == 0
    for mode in ("flexivit", "mspe"):
        lines = (tmp_path / f"diag_{mode}.csv").read_text().splitlines()
        assert lines[0] == "image_id,patch_cos,cls_cos" and len(lines) == 6
        vals = np.array([[float(v) for v in line.split(",")[1:]] for line in lines[1:]])
        assert np.all(np.abs(vals) <= 1.0)


def test_runtime_error_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + bytes(20))
    assert main(["eval", "--seed", "0", "--checkpoint", str(bad), "--square", "16:16:1"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("mspe: error: CheckpointError:") and err.count("\n") == 1
