import json

import numpy as np
import pytest
from PIL import Image

from ifdreid import cli
from ifdreid.config import load_config
from ifdreid.datamodel import load_dataset
from ifdreid.network import load_checkpoint, save_checkpoint
from ifdreid.training import read_metrics_log


def load_split(root, name):
    return load_dataset(root, root / f"{name}.tsv")


FAST = ["backbone.widths=[4,4,8,8]", "sampler.P=2", "sampler.B=2"]


def _args(root, *extra):
    out = []
    for item in [f"data.root={root}", *FAST, *extra]:
        out += ["--set", item]
    return out


@pytest.fixture(scope="module")
def trained(small_synth, tmp_path_factory):
    root, _ = small_synth
    out = tmp_path_factory.mktemp("cli-train")
    assert cli.main(["train", "--variant", "ifd", "--epochs", "1", "1", "--out", str(out), *_args(root)]) == 0
    return root, out


def test_generate_writes_split_and_honours_overrides(tmp_path):
    assert cli.main(["generate", "--out", str(tmp_path), "--set", "synth.num_identities=3",
                     "--set", "synth.images_per_appearance=2"]) == 0
    train = load_split(tmp_path, "train")
    query = load_split(tmp_path, "query")
    assert {s.identity for s in train} == {0, 1, 2}
    assert len(query) == 3 * 2
    assert (tmp_path / "config.yaml").is_file()


def test_missing_config_is_a_usage_error(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    assert cli.main(["generate", "--config", str(missing), "--out", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_variant_is_a_usage_error(small_synth, tmp_path):
    root, _ = small_synth
    assert cli.main(["train", "--variant", "nope", "--out", str(tmp_path), *_args(root)]) == 2


def test_train_logs_every_planned_step(trained):
    _, out = trained
    rows = read_metrics_log(out / "metrics.tsv")
    assert [r["step"] for r in rows] == list(range(len(rows)))
    # phase-1 rows train the attention stream alone
    assert any(r["id_main"] is None for r in rows) and any(r["id_main"] is not None for r in rows)
    assert (out / "phase1.ckpt").is_file() and (out / "model.ckpt").is_file()
    assert load_config(out / "config.yaml").train.variant == "ifd"


def test_train_baseline_has_no_attention_parameters(small_synth, tmp_path):
    root, _ = small_synth
    assert cli.main(["train", "--variant", "baseline", "--epochs", "0", "0", "--out", str(tmp_path), *_args(root)]) == 0
    tensors, header = load_checkpoint(tmp_path / "model.ckpt")
    assert header["variant"] == "baseline"
    assert not any(".ikt." in k or ".attn" in k for k in tensors)
    assert header["train"]["step"] == 0
    assert not (tmp_path / "phase1.ckpt").exists()


def test_eval_reports_every_mode_and_is_repeatable(trained, capsys):
    root, out = trained
    argv = ["eval", "--variant", "ifd", "--out", str(out), *_args(root)]
    assert cli.main(argv) == 0
    first = (out / "results.json").read_bytes()
    assert cli.main(argv) == 0
    assert (out / "results.json").read_bytes() == first
    payload = json.loads(first)
    assert set(payload["results"]) == {"general", "same-clothing", "clothing-change"}
    assert payload["config_hash"] == load_config(out / "config.yaml").hash()
    assert "clothing-change: rank-1" in capsys.readouterr().out


def test_eval_oracle_features_are_perfect(small_synth, tmp_path):
    root, _ = small_synth
    assert cli.main(["eval", "--oracle", "--mode", "cc", "--out", str(tmp_path), *_args(root)]) == 0
    block = json.loads((tmp_path / "results.json").read_text())["results"]["clothing-change"]
    assert block["rank1"] == 1.0 and block["mAP"] == 1.0


def test_eval_without_checkpoint_fails_cleanly(small_synth, tmp_path, capsys):
    root, _ = small_synth
    assert cli.main(["eval", "--out", str(tmp_path), *_args(root)]) == 2
    assert "checkpoint not found" in capsys.readouterr().err


def test_resume_into_incompatible_model_reports_mismatch(trained, tmp_path, capsys):
    root, out = trained
    argv = ["train", "--variant", "ifd", "--resume", str(out / "model.ckpt"), "--out", str(tmp_path),
            *_args(root, "backbone.widths=[4,4,8,16]")]
    assert cli.main(argv) == 1
    err = capsys.readouterr().err
    assert "ValidationError" in err and "checkpoint" in err and "vs model" in err


def test_resume_extends_a_finished_run(trained, tmp_path):
    root, out = trained
    argv = ["train", "--variant", "ifd", "--epochs", "1", "2", "--resume", str(out / "model.ckpt"),
            "--out", str(tmp_path), *_args(root)]
    assert cli.main(argv) == 0
    _, before = load_checkpoint(out / "model.ckpt")
    _, after = load_checkpoint(tmp_path / "model.ckpt")
    assert after["train"]["step"] > before["train"]["step"]
    assert after["train"]["epoch"] == 2


def test_dump_attention_with_zero_kernel_is_flat_grey(small_synth, tmp_path):
    root, _ = small_synth
    run = tmp_path / "run"
    assert cli.main(["train", "--variant", "ikt", "--epochs", "0", "0", "--out", str(run), *_args(root)]) == 0
    tensors, header = load_checkpoint(run / "model.ckpt")
    for k in list(tensors):
        if k.startswith("model.ikt."):
            tensors[k] = np.zeros_like(tensors[k])
    save_checkpoint(run / "zero.ckpt", tensors, header)
    argv = ["dump-attention", "--checkpoint", str(run / "zero.ckpt"), "--out", str(tmp_path), *_args(root)]
    assert cli.main(argv) == 0
    pngs = sorted((tmp_path / "attention").glob("*.png"))
    query = load_split(root, "query")
    assert len(pngs) == len(query)
    for png, sample in zip(pngs, query):
        pixels = np.asarray(Image.open(png))
        assert pixels.shape == sample.image.shape[:2]
        assert np.all(pixels == 128)


def test_dump_attention_rejects_baseline(small_synth, tmp_path):
    root, _ = small_synth
    assert cli.main(["train", "--variant", "baseline", "--epochs", "0", "0", "--out", str(tmp_path), *_args(root)]) == 0
    argv = ["dump-attention", "--checkpoint", str(tmp_path / "model.ckpt"), "--out", str(tmp_path), *_args(root)]
    assert cli.main(argv) == 2


def test_ablate_rows_share_seed_and_hash(small_synth, tmp_path, capsys):
    root, _ = small_synth
    assert cli.main(["ablate", "--epochs", "1", "1", "--seed", "3", "--out", str(tmp_path), *_args(root)]) == 0
    rows = json.loads((tmp_path / "ablation.json").read_text())["rows"]
    assert [r["variant"] for r in rows] == list(cli.ABLATION_ORDER)
    assert {r["seed"] for r in rows} == {3}
    assert len({r["config_hash"] for r in rows}) == 1
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("variant\tseed\tconfig_hash")
    assert [ln.split("\t")[0] for ln in lines[1:]] == list(cli.ABLATION_ORDER)
    assert (tmp_path / "ablation.tsv").read_text().strip().splitlines() == lines
