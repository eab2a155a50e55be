"""Configs, dataset shards, checkpoints, training, evaluation and the CLI."""

import dataclasses
import json

import numpy as np
import pytest

from truncpose import tensor as T
from truncpose.body_model import forward_kinematics, keypoints_from_joints, project_numpy
from truncpose.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from truncpose.cli import main
from truncpose.config import DataConfig, ExperimentConfig, OptimConfig, parse_config, serialize_config
from truncpose.data import DataFormatError, generate_dataset, generate_records, load_dataset
from truncpose.evaluate import EvaluationError, evaluate, oracle_predictions, read_report, write_report
from truncpose.layers import ConfigError
from truncpose.metrics import pck_dataset
from truncpose.models import build_model, init_model
from truncpose.tensor import Tensor
from truncpose.train import TrainingError, train

HW = (64, 64)


def _cfg(model="SwinPose-T-S3", steps=3, lr=1e-3, n=8, tmp=None, **kw):
    return ExperimentConfig(model, "toy", 0, str(tmp or "runs/test"), DataConfig(n, *HW),
                            OptimConfig(lr=lr, steps=steps, batch_size=4, log_every=0), **kw)


class TestConfig:
    def test_roundtrip_fixed_point(self):
        cfg = _cfg(lr=3e-4, steps=17)
        text = serialize_config(cfg)
        back = parse_config(text)
        assert back == cfg
        assert serialize_config(back) == text

    @pytest.mark.parametrize("text", [
        "[experiment]\nmodel = SwinPose-B-S9\n",
        "[experiment]\nseed = 1\n",
        "[experiment]\nmodel = VMPose-T-S2\n[optim]\nmomentum = 0.9\n",
        "[experiment]\nmodel = VMPose-T-S2\n[optim]\nsteps = many\n",
        "not an ini",
    ])
    def test_rejects(self, text):
        from truncpose.truncation import ModelNameError
        with pytest.raises((ConfigError, ModelNameError)):
            parse_config(text)

    def test_workspace_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("TRUNCPOSE_WORKSPACE", str(tmp_path))
        assert _cfg().output_path == tmp_path / "runs/test"


class TestDataset:
    def test_shards_byte_identical(self, tmp_path):
        a = generate_dataset(tmp_path / "a", 8, 7, HW, shard_size=3)
        b = generate_dataset(tmp_path / "b", 8, 7, HW, shard_size=3)
        assert len(a) == 3
        assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]

    def test_threaded_merge_matches(self, tmp_path):
        a = generate_dataset(tmp_path / "a", 6, 2, HW, workers=1)
        b = generate_dataset(tmp_path / "b", 6, 2, HW, workers=3)
        assert a[0].read_bytes() == b[0].read_bytes()

    def test_roundtrip(self, tmp_path):
        generate_dataset(tmp_path, 5, 1, HW, shard_size=2)
        recs, ref = load_dataset(tmp_path), generate_records(5, 1, HW)
        for r, s in zip(recs, ref):
            assert r.index == s.index
            np.testing.assert_array_equal(r.image, s.image)
            np.testing.assert_array_equal(r.joints3d, s.joints3d)

    def test_visible_keypoints_in_image(self):
        for r in generate_records(32, 4, (64, 48)):
            vis = r.keypoints2d[:, 2] > 0
            xy = r.keypoints2d[vis, :2]
            assert ((xy >= 0) & (xy <= [47, 63])).all()

    def test_reprojection_consistency(self):
        for r in generate_records(16, 5, HW):
            j = forward_kinematics(r.params.rotmats, r.params.beta)
            np.testing.assert_array_equal(j[0], r.joints3d)
            uv = keypoints_from_joints(project_numpy(j, r.params.cam, HW))[0]
            np.testing.assert_array_equal(uv, r.keypoints2d[:, :2])

    def test_bad_shard(self, tmp_path):
        (tmp_path / "shard-00000.tpds").write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(DataFormatError):
            load_dataset(tmp_path)

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            generate_records(0, 0, HW)


class TestCheckpoint:
    @pytest.mark.parametrize("name", ["GMFPose-S-S4", "VMHMR2.0-T-S2"])
    def test_roundtrip_bit_identical(self, name, tmp_path):
        src = init_model(build_model(name, "toy"), 3)
        save_checkpoint(tmp_path / "m.tpck", src, step=9)
        dst = init_model(build_model(name, "toy"), 4)
        assert load_checkpoint(tmp_path / "m.tpck", dst) == 9
        rng = np.random.default_rng(0)
        with T.no_grad():
            for _ in range(10):
                x = Tensor(rng.uniform(size=(1, 3, 64, 64)))
                a, b = src(x), dst(x)
                if name.startswith("GMF"):
                    np.testing.assert_array_equal(a.data, b.data)
                else:
                    np.testing.assert_array_equal(a.rotmats.data, b.rotmats.data)
                    np.testing.assert_array_equal(a.cam.data, b.cam.data)

    def test_save_is_deterministic(self, tmp_path):
        m = init_model(build_model("SwinPose-T-S2", "toy"), 1)
        assert save_checkpoint(tmp_path / "a", m) == save_checkpoint(tmp_path / "b", m)

    def test_fingerprint_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "m.tpck", init_model(build_model("SwinPose-T-S3", "toy"), 0))
        with pytest.raises(CheckpointError, match="fingerprint"):
            load_checkpoint(tmp_path / "m.tpck", build_model("SwinPose-T-S2", "toy"))

    def test_truncated_file(self, tmp_path):
        buf = save_checkpoint(tmp_path / "m.tpck", init_model(build_model("VMPose-T-S2", "toy"), 0))
        (tmp_path / "m.tpck").write_bytes(buf[:-5])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.tpck", build_model("VMPose-T-S2", "toy"))


class TestTrain:
    def test_zero_lr_keeps_weights(self):
        cfg = _cfg(lr=0.0, steps=3)
        init = init_model(build_model(cfg.model, "toy"), 0)
        before = {k: v.copy() for k, v in init.state_dict().items()}
        res = train(cfg, records=generate_records(8, 0, HW), save=False, model=init)
        for k, v in res.model.state_dict().items():
            np.testing.assert_array_equal(v, before[k])

    def test_loss_trace_reproducible(self):
        recs = generate_records(8, 0, HW)
        a = train(_cfg("VMHMR2.0-T-S2", steps=4), records=recs, save=False).losses
        b = train(_cfg("VMHMR2.0-T-S2", steps=4), records=recs, save=False).losses
        assert len(a) == 4 and a == b

    def test_nan_aborts_with_step(self):
        recs = generate_records(4, 0, HW)
        recs[2] = dataclasses.replace(recs[2], image=np.full_like(recs[2].image, np.nan))
        cfg = dataclasses.replace(_cfg(steps=5), optim=OptimConfig(lr=1e-3, steps=5, batch_size=1, log_every=0))
        with pytest.raises(TrainingError) as exc:
            train(cfg, records=recs, save=False)
        assert exc.value.step >= 0 and str(exc.value.step) in str(exc.value)

    def test_outputs_written(self, tmp_path):
        res = train(_cfg(tmp=tmp_path, steps=2), records=generate_records(8, 0, HW))
        assert res.final_path.exists() and res.best_path.exists()
        assert (tmp_path / "losses.csv").read_text().count("\n") == 3
        assert parse_config((tmp_path / "config.ini").read_text()) == _cfg(tmp=tmp_path, steps=2)


class TestEvaluate:
    def test_oracle_is_perfect(self):
        recs = generate_records(12, 2, HW)
        hmr = build_model("GMFHMR2.0-T-S3", "toy")
        rep = evaluate(hmr, recs, predictions=oracle_predictions(recs))
        m = rep.per_dataset["synthetic"]
        assert m["PCK@0.05"] == m["PCK@0.1"] == 100.0
        assert m["MPJPE"] == 0.0 and m["PA-MPJPE"] < 1e-8
        pose = build_model("GMFPose-T-S3", "toy")
        m = evaluate(pose, recs, predictions=oracle_predictions(recs)).per_dataset["synthetic"]
        assert m["AP"] == m["AR"] == 100.0

    def test_twice_identical(self, tmp_path):
        recs = generate_records(8, 1, HW)
        m = init_model(build_model("SwinHMR2.0-T-S4", "toy"), 0)
        a, b = evaluate(m, recs), evaluate(m, recs)
        assert a == b
        write_report(a, tmp_path / "r.json")
        assert read_report(tmp_path / "r.json") == a

    def test_random_init_above_centre_floor(self):
        recs = generate_records(64, 3, HW)
        m = init_model(build_model("VMHMR2.0-T-S2", "toy"), 0)
        got = evaluate(m, recs).per_dataset["synthetic"]["PCK@0.1"]
        # floor: every keypoint predicted at the image centre, recounted directly
        hits = total = 0
        for r in recs:
            norm = r.bbox_size
            for x, y, v in r.keypoints2d:
                if v > 0:
                    total += 1
                    hits += np.hypot(x - 32.0, y - 32.0) <= 0.1 * norm
        floor_per_sample = pck_dataset([np.full((17, 2), 32.0)] * len(recs), [r.keypoints2d for r in recs], 0.1)[0]
        assert floor_per_sample < got < 100.0
        assert hits / total < got / 100

    def test_task_mismatch(self):
        with pytest.raises(EvaluationError):
            evaluate(build_model("SwinPose-T-S3", "toy"), generate_records(2, 0, HW), task="HMR")


class TestCli:
    def test_inspect(self, capsys):
        assert main(["inspect", "SwinPose-B-S3", "--json"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["adapter"]["kind"] == "Identity"

    def test_inspect_bad_name(self, capsys):
        assert main(["inspect", "BadName-S9"]) == 1
        assert "^" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_sweep(self, capsys):
        assert main(["sweep", "--all-hierarchical"]) == 0
        assert len(capsys.readouterr().out.strip().splitlines()) == 28

    def test_missing_config_is_runtime_error(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.ini")]) == 2

    def test_pipeline(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("TRUNCPOSE_WORKSPACE", str(tmp_path))
        cfg = tmp_path / "exp.ini"
        cfg.write_text(serialize_config(_cfg("VMHMR2.0-T-S2", steps=2, tmp="run")))
        assert main(["generate", "--out", str(tmp_path / "data"), "--n", "8"]) == 0
        assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "data")]) == 0
        assert main(["eval", "--config", str(cfg), "--data", str(tmp_path / "data")]) == 0
        assert (tmp_path / "run" / "report.json").exists()
        assert main(["eval", "--config", str(cfg), "--task", "HPE"]) == 2
        capsys.readouterr()
        assert main(["report", str(tmp_path / "run" / "report.json")]) == 0
        assert "VMHMR2.0-T-S2" in capsys.readouterr().out
