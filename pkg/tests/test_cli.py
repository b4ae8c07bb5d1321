import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from sarfuse import cli
from sarfuse.data import SplitManifest, load_scene, read_manifest, read_raster
from sarfuse.metrics import ConfusionCounts, accumulate, iou
from sarfuse.training import ExperimentConfig, prepare_dataset, train


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "data"), "--n-scenes", "3", "--height", "64", "--width", "64",
                     "--smoothness", "9", "--seed", "4"]) == 0
    cfg = ExperimentConfig(manifest=str(root / "data" / "manifest.csv"), base_width=4, stem_width=4, epochs=3,
                           patch_size=32, batch_size=4, split_fractions=(0.5, 0.25, 0.25))
    (root / "cfg.json").write_text(cfg.to_json())
    assert cli.main(["train", "--config", str(root / "cfg.json"), "--out", str(root / "run")]) == 0
    return root, cfg


def test_synth_outputs(workspace):
    root, _ = workspace
    data = root / "data"
    assert len(read_manifest(data / "manifest.csv")) == 3
    assert not (root / "data.partial").exists()
    assert json.loads((data / "synth_config.json").read_text())["height"] == 64


def test_synth_class_means_override(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path / "d"), "--n-scenes", "2", "--height", "32", "--width", "32",
                     "--class-means", "open_water", "0.02", "0.004"]) == 0
    cfg = json.loads((tmp_path / "d" / "synth_config.json").read_text())
    assert cfg["classes"][0] == {"name": "open_water", "mean_vv": 0.02, "mean_vh": 0.004, "flooded": True}
    assert cli.main(["synth", "--out", str(tmp_path / "e"), "--class-means", "swamp", "1", "1"]) == 1


def test_synth_idempotent(tmp_path):
    args = ["--n-scenes", "2", "--height", "32", "--width", "32"]
    cli.main(["synth", "--out", str(tmp_path / "a")] + args)
    cli.main(["synth", "--out", str(tmp_path / "b")] + args)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_train_outputs(workspace):
    root, _ = workspace
    run = root / "run"
    for name in ("metrics.csv", "metrics.txt", "train_log.csv", "checkpoint/manifest.txt", "checkpoint/splits.csv",
                 "checkpoint/config.json"):
        assert (run / name).exists(), name
    assert (run / "metrics.csv").read_text().startswith("method,iou,csi,f1,oa,tp,fp,fn,tn\n")
    assert len((run / "train_log.csv").read_text().splitlines()) == 4


def test_dump_config(capsys):
    assert cli.main(["train", "--dump-config"]) == 0
    assert ExperimentConfig.from_json(capsys.readouterr().out) == ExperimentConfig()


def test_env_roots(workspace, tmp_path, monkeypatch):
    root, _ = workspace
    monkeypatch.setenv(cli.DATA_ENV, str(root))
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path))
    assert cli.main(["eval", "--checkpoint", str(root / "run" / "checkpoint"), "--manifest", "data/manifest.csv",
                     "--out", "ev"]) == 0
    assert (tmp_path / "ev" / "metrics.csv").exists()


def test_eval_matches_log_and_is_deterministic(workspace):
    root, cfg = workspace
    ck = root / "run" / "checkpoint"
    outs = []
    for name in ("e1", "e2"):
        assert cli.main(["eval", "--checkpoint", str(ck), "--manifest", cfg.manifest, "--out", str(root / name)]) == 0
        outs.append((root / name / "metrics.csv").read_bytes())
    assert outs[0] == outs[1]
    assert outs[0] == (root / "run" / "metrics.csv").read_bytes()


def test_eval_oracle_predictor(workspace):
    _, cfg = workspace
    data = prepare_dataset(cfg)
    X, y = data.split("test")
    truth = iter([y])
    counts = cli.evaluate_split(lambda xb: next(truth), X, y, batch=len(y))
    csv_text, _ = cli.report({"oracle": counts})
    assert csv_text.splitlines()[1].startswith("oracle,100.0,100.0,100.0,100.0")


def test_eval_empty_split(workspace, tmp_path):
    root, cfg = workspace
    splits = SplitManifest.load(root / "run" / "checkpoint" / "splits.csv", 32)
    empty = SplitManifest({**splits.splits, "test": []}, splits.fractions, splits.seed, 32)
    empty.save(tmp_path / "s.csv")
    rc = cli.main(["eval", "--checkpoint", str(root / "run" / "checkpoint"), "--manifest", cfg.manifest,
                   "--splits", str(tmp_path / "s.csv"), "--out", str(tmp_path / "ev")])
    assert rc == 1
    assert not (tmp_path / "ev").exists()
    with pytest.raises(cli.CliError):
        cli.evaluate_split(lambda x: x, np.zeros((0, 4, 8, 8)), np.zeros((0, 8, 8)))


def test_eval_incompatible_manifest(workspace, tmp_path):
    root, _ = workspace
    cli.main(["synth", "--out", str(tmp_path / "other"), "--n-scenes", "2", "--height", "32", "--width", "32"])
    rc = cli.main(["eval", "--checkpoint", str(root / "run" / "checkpoint"),
                   "--manifest", str(tmp_path / "other" / "manifest.csv"), "--out", str(tmp_path / "ev")])
    assert rc == 1


def test_predict_outputs_and_self_consistency(workspace):
    root, cfg = workspace
    splits = SplitManifest.load(root / "run" / "checkpoint" / "splits.csv", 32)
    counts = None
    for row in read_manifest(cfg.manifest):
        out = root / f"pred_{row.id}"
        assert cli.main(["predict", "--checkpoint", str(root / "run" / "checkpoint"),
                         "--scene", str(Path(cfg.manifest).parent / row.path), "--out", str(out)]) == 0
        header = json.loads((out / f"{row.id}.pred.json").read_text())
        mask = read_raster(out / header["files"]["mask"], (64, 64), "u1")
        prob = read_raster(out / header["files"]["prob"], (64, 64), "<f4")
        assert set(np.unique(mask)) <= {0, 1}
        assert np.array_equal(mask, (prob >= 0.5).astype(np.uint8))
        assert Image.open(out / f"{row.id}.pred.mask.png").size == (64, 64)
        truth = load_scene(Path(cfg.manifest).parent / row.path).mask
        for sid, r, c in splits.splits["train"]:
            if sid == row.id:
                counts = accumulate(counts, mask[r:r + 32, c:c + 32], truth[r:r + 32, c:c + 32])
    # re-scoring the stitched predictions over the training windows reproduces the logged training counts
    assert counts == train(cfg).log.train_counts


def test_predict_tau_monotone(workspace):
    root, cfg = workspace
    scene = Path(cfg.manifest).parent / "scene_000.json"
    fractions = []
    for tau in ("0.3", "0.5", "0.999999"):
        out = root / f"tau_{tau}"
        assert cli.main(["predict", "--checkpoint", str(root / "run" / "checkpoint"), "--scene", str(scene),
                         "--out", str(out), "--tau", tau]) == 0
        fractions.append(read_raster(out / "scene_000.pred.mask.u8r", (64, 64), "u1").mean())
    assert fractions[0] >= fractions[1] >= fractions[2]
    assert fractions[2] < load_scene(scene).mask.mean()


def test_predict_refuses_bad_extent(workspace, tmp_path):
    root, _ = workspace
    est = cli.load_checkpoint(root / "run" / "checkpoint")
    with pytest.raises(cli.CliError, match="refusing"):
        cli.predict_scene(est, np.ones((36, 32), np.float32), np.ones((36, 32), np.float32), 32)
    # a 48-pixel scene tiles as 32 + 16, both divisible by 8
    assert cli.predict_scene(est, np.ones((48, 48)), np.ones((48, 48)), 32).shape == (48, 48)


def test_failure_quarantines_output(tmp_path):
    rc = cli.main(["train", "--manifest", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "run")])
    assert rc == 1
    assert not (tmp_path / "run").exists()


def test_staged_keeps_partial_on_error(tmp_path):
    final = tmp_path / "out"
    with pytest.raises(RuntimeError):
        with cli.staged(final) as tmp:
            tmp.mkdir()
            (tmp / "half.txt").write_text("x")
            raise RuntimeError("boom")
    assert not final.exists()
    assert (tmp_path / "out.partial" / "half.txt").exists()
    with cli.staged(final) as tmp:
        tmp.mkdir()
    assert final.is_dir() and not (tmp_path / "out.partial").exists()


def test_compare_reduced(workspace, tmp_path):
    root, cfg = workspace
    small = replace(cfg, epochs=1)
    (tmp_path / "cfg.json").write_text(small.to_json())
    assert cli.main(["compare", "--config", str(tmp_path / "cfg.json"), "--seeds", "0", "--out",
                     str(tmp_path / "cmp")]) == 0
    rows = []
    for kind in ("unet", "autoencoder"):
        lines = (tmp_path / "cmp" / f"report_{kind}.csv").read_text().splitlines()[1:]
        rows += lines
        for line in lines:
            fields = line.split(",")
            assert fields[-10] == fields[-9]  # iou == csi
    assert len(rows) == 10
    assert "[autoencoder]" in (tmp_path / "cmp" / "report.txt").read_text()
