import json
import os
from pathlib import Path

import pytest

from multipivot import cli
from multipivot.evaluation import read_report_csv

SNAPSHOTS = Path(__file__).parent / "snapshots"
COMMANDS = [None, "gen-corpus", "train", "translate", "pipeline-translate", "evaluate", "grid", "report"]

TINY_MODEL = ["--layers", "1", "--heads", "2", "--hidden", "16", "--ff", "32", "--max-len", "32"]
TINY_TRAIN = ["--max-steps", "6", "--eval-every", "3", "--batch-size", "8", "--warmup", "3", "--dev-limit", "5"]


def help_text(command, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    argv = ([command] if command else []) + ["--help"]
    assert cli.main(argv) == 0
    return capsys.readouterr().out


@pytest.mark.parametrize("command", COMMANDS)
def test_help_snapshot(command, capsys, monkeypatch):
    text = help_text(command, capsys, monkeypatch)
    snap = SNAPSHOTS / f"help-{command or 'main'}.txt"
    if os.environ.get("UPDATE_SNAPSHOTS"):
        snap.parent.mkdir(exist_ok=True)
        snap.write_text(text)
    assert text == snap.read_text()


@pytest.mark.parametrize("command", COMMANDS[1:])
def test_help_lists_every_flag(command, capsys, monkeypatch):
    text = help_text(command, capsys, monkeypatch)
    sub = cli.build_parser()._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text


def test_exit_codes(capsys, monkeypatch, tmp_path):
    assert cli.main([]) == 1
    assert cli.main(["no-such-command"]) == 1
    assert cli.main(["gen-corpus", "--bogus"]) == 1
    assert cli.main(["evaluate", "--hyp", str(tmp_path / "missing"), "--ref", "x"]) == 1
    (tmp_path / "bad.json").write_text("[1, 2")
    assert cli.main(["gen-corpus", "--spec", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 1

    def boom(args, argv):
        raise RuntimeError("boom")
    parser = cli.build_parser
    monkeypatch.setattr(cli, "build_parser", lambda: _with_func(parser(), "evaluate", boom))
    assert cli.main(["evaluate", "--hyp", "a", "--ref", "b"]) == 2
    assert "internal error" in capsys.readouterr().err


def _with_func(parser, command, func):
    parser._subparsers._group_actions[0].choices[command].set_defaults(func=func)
    return parser


def _gen(out, *extra):
    argv = ["gen-corpus", "--out", str(out), "--seed", "3", "--train-size", "60", "--dev-size", "10",
            "--test-size", "12", *extra]
    assert cli.main(argv) == 0
    return argv


def test_gen_corpus_is_deterministic(tmp_path):
    _gen(tmp_path / "a")
    _gen(tmp_path / "b")
    for name in ("train.tsv", "dev.tsv", "test.tsv", "spec.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "train.tsv").read_text().splitlines()[0] == "src\tpa\tpb\ttgt"
    assert len((tmp_path / "a" / "test.tsv").read_text().splitlines()) == 13


def test_gen_corpus_spec_file_and_flag_precedence(tmp_path):
    (tmp_path / "spec.json").write_text(json.dumps({"seed": 9, "sizes": {"train": 5, "dev": 5, "test": 5}}))
    assert cli.main(["gen-corpus", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "o"),
                     "--dev-size", "2"]) == 0
    spec = json.loads((tmp_path / "o" / "spec.json").read_text())
    assert spec["seed"] == 9 and spec["sizes"] == {"train": 5, "dev": 2, "test": 5}


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.main(["gen-corpus", "--train-size", "4", "--dev-size", "2", "--test-size", "2"]) == 0
    assert (tmp_path / "env" / "train.tsv").exists()
    assert (tmp_path / "env" / "gen-corpus.manifest.json").exists()


def _rerun_from_manifest(path):
    manifest = json.loads(Path(path).read_text())
    before = {p: Path(p).read_bytes() for p in manifest["outputs"]}
    assert cli.main(manifest["argv"]) == 0
    after = json.loads(Path(path).read_text())
    assert after["outputs"] == manifest["outputs"]
    assert all(Path(p).read_bytes() == b for p, b in before.items())
    return manifest


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny end-to-end run: corpus, two s2p models, one multi-source p2t model and a direct model."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert cli.main(["gen-corpus", "--out", str(data), "--seed", "1", "--train-size", "40", "--dev-size", "6",
                     "--test-size", "5"]) == 0
    runs = {"s2p_pa": ("src", "pa", ["--tgt-vocab-from", "pa,pb"]),
            "s2p_pb": ("src", "pb", ["--tgt-vocab-from", "pa,pb"]),
            "p2t": ("pa,pb", "tgt", []), "direct": ("src", "tgt", [])}
    for name, (src, tgt, extra) in runs.items():
        argv = ["train", "--data", str(data), "--src", src, "--tgt", tgt, "--out", str(root / name), "--seed", "2",
                *TINY_MODEL, *TINY_TRAIN, *extra]
        assert cli.main(argv) == 0
    (root / "p.json").write_text(json.dumps({
        "s2p": ["s2p_pa/model.ckpt", "s2p_pb/model.ckpt"], "p2t": "p2t/model.ckpt",
        "k_s2p": 2, "k_p2t": 6, "pivots": ["pa", "pb"], "max_steps": 20}))
    return root


def test_train_outputs_and_manifest(workspace):
    out = workspace / "direct"
    assert (out / "model.ckpt").exists()
    curve = (out / "curve.csv").read_text().splitlines()
    assert curve[0] == "step,loss,dev_bleu" and len(curve) == 3
    manifest = _rerun_from_manifest(out / "train.manifest.json")
    assert manifest["seed"] == 2 and manifest["config"]["model"]["layers"] == 1


def test_train_config_file_precedence(workspace, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"model": {"layers": 1, "heads": 2, "hidden_size": 16,
                                                           "ff_size": 32, "max_len": 32},
                                                 "train": {"max_steps": 3, "eval_every": 3, "batch_size": 4,
                                                           "dev_limit": 3, "lr": 0.5}}))
    assert cli.main(["train", "--data", str(workspace / "data"), "--src", "src", "--tgt", "tgt",
                     "--config", str(tmp_path / "c.json"), "--lr", "0.002", "--out", str(tmp_path / "o")]) == 0
    cfg = json.loads((tmp_path / "o" / "train.manifest.json").read_text())["config"]
    assert cfg["train"]["lr"] == 0.002 and cfg["train"]["max_steps"] == 3
    (tmp_path / "bad.json").write_text(json.dumps({"model": {"depth": 3}}))
    assert cli.main(["train", "--data", str(workspace / "data"), "--src", "src", "--tgt", "tgt",
                     "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o2")]) == 1


def test_translate_stdin_and_files(workspace, tmp_path, capsys, monkeypatch):
    src = [line.split("\t")[0] for line in (workspace / "data" / "test.tsv").read_text().splitlines()[1:]]
    (tmp_path / "in.txt").write_text("\n".join(src) + "\n")
    ckpt = str(workspace / "direct" / "model.ckpt")
    assert cli.main(["translate", "--model", ckpt, "--input", str(tmp_path / "in.txt"), "--output",
                     str(tmp_path / "full.txt"), "--max-steps", "20"]) == 0
    assert len((tmp_path / "full.txt").read_text().splitlines()) == len(src)
    # k larger than any source equals full-sentence decoding
    assert cli.main(["translate", "--model", ckpt, "--k", "50", "--input", str(tmp_path / "in.txt"),
                     "--output", str(tmp_path / "k50.txt"), "--max-steps", "20"]) == 0
    assert (tmp_path / "k50.txt").read_text() == (tmp_path / "full.txt").read_text()
    _rerun_from_manifest(tmp_path / "translate.manifest.json")
    import io
    monkeypatch.setattr("sys.stdin", io.StringIO(src[0] + "\n"))
    assert cli.main(["translate", "--model", ckpt, "--k", "2", "--max-steps", "20"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 1
    assert cli.main(["translate", "--model", ckpt, "--k", "0"]) == 1
    two = str(workspace / "p2t" / "model.ckpt")
    assert cli.main(["translate", "--model", two, "--input", str(tmp_path / "in.txt")]) == 1


def test_pipeline_translate_trace(workspace, tmp_path):
    src = [line.split("\t")[0] for line in (workspace / "data" / "test.tsv").read_text().splitlines()[1:]]
    src = [s for s in src if len(s.split()) >= 8] or src
    (tmp_path / "in.txt").write_text("\n".join(src) + "\n")
    assert cli.main(["pipeline-translate", "--pipeline", str(workspace / "p.json"), "--k-s2p", "2", "--k-p2t", "6",
                     "--input", str(tmp_path / "in.txt"), "--output", str(tmp_path / "out.txt"), "--trace",
                     "--trace-file", str(tmp_path / "trace.tsv")]) == 0
    trace = (tmp_path / "trace.tsv").read_text().splitlines()
    firsts = [line for line in trace if line.startswith("# sentence")]
    assert len(firsts) == len(src)
    # count source READs before the first target WRITE in each sentence block
    blocks, cur = [], None
    for line in trace:
        if line.startswith("#"):
            cur = []
            blocks.append(cur)
        else:
            cur.append(line.split("\t"))
    for ev, sentence in zip(blocks, src):
        reads = 0
        for tick, stage, kind, tok in ev:
            if stage == "src":
                reads += 1
            if stage == "p2t" and kind == "WRITE":
                assert reads >= min(8, len(sentence.split()))
                break
    _rerun_from_manifest(tmp_path / "pipeline-translate.manifest.json")
    assert cli.main(["pipeline-translate", "--pipeline", str(workspace / "p.json"), "--k-s2p", "x",
                     "--input", str(tmp_path / "in.txt")]) == 1


def test_grid_evaluate_report(workspace, tmp_path, capsys):
    out = tmp_path / "grid"
    assert cli.main(["grid", "--data", str(workspace / "data"), "--k", "1,2,4,6,8", "--max-steps", "20",
                     "--direct", f"direct={workspace / 'direct' / 'model.ckpt'}",
                     "--pipeline", f"multi={workspace / 'p.json'}", "--out", str(out)]) == 0
    results = read_report_csv(out / "grid.csv")
    assert [r.label for r in results] == ["direct", "multi"] and results[1].num_cells == 25
    assert len((out / "grid.csv").read_text().splitlines()) == 1 + 5 + 25
    _rerun_from_manifest(out / "grid.manifest.json")

    assert cli.main(["report", "--csv", str(out / "grid.csv"), "--md", str(tmp_path / "r.md"),
                     "--title", "Grid"]) == 0
    md = (tmp_path / "r.md").read_text()
    assert md.startswith("# Grid") and "## multi: BLEU" in md
    assert cli.main(["grid", "--data", str(workspace / "data"), "--out", str(out)]) == 1

    (tmp_path / "h.txt").write_text("a b c d\nx y\n")
    (tmp_path / "r.txt").write_text("a b c d\nx y\n")
    capsys.readouterr()
    assert cli.main(["evaluate", "--hyp", str(tmp_path / "h.txt"), "--ref", str(tmp_path / "r.txt"),
                     "--out", str(tmp_path / "ev")]) == 0
    assert json.loads(capsys.readouterr().out)["bleu"] == 100.0
    _rerun_from_manifest(tmp_path / "ev" / "evaluate.manifest.json")
