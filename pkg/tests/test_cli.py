"""CLI contract tests: subcommands, exit codes, machine-parsable errors."""
import numpy as np
import pytest

from gridkp import cli


def run_cli(args):
    return cli.main(args)


def write_config(tmp_path, **kw):
    from gridkp.config import TrainConfig, serialize_config

    base = dict(
        grid_height=32, grid_width=32, num_keypoints=4, image_size=32,
        t_obs=3, horizon=3, data_root=str(tmp_path / "data"),
        run_dir=str(tmp_path / "run"), data_num_train=4, data_num_test=2,
        data_frames=8, data_num_objects=1, data_radius=3.0,
        det_steps=6, det_batch=2, det_base=8, det_eval_every=3,
        pred_steps=4, pred_batch=2, pred_window=5, pred_eval_every=2,
    )
    base.update(kw)
    cfg = TrainConfig(**base)
    path = tmp_path / "config.ini"
    path.write_text(serialize_config(cfg))
    return path


class TestErrors:
    def test_unknown_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as e:
            run_cli(["gen-data", "--no-such-flag"])
        assert e.value.code == 2

    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as e:
            run_cli(["frobnicate"])
        assert e.value.code == 2

    def test_missing_config_exits_3(self, tmp_path, capsys):
        code = run_cli(["gen-data", "--config", str(tmp_path / "nope.ini")])
        assert code == 3
        assert capsys.readouterr().err.startswith("gridkp: error: config:")

    def test_bad_override_exits_3(self, tmp_path, capsys):
        code = run_cli(["gen-data", "--set", "bogus=1"])
        assert code == 3

    def test_train_without_data_exits_4(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        # no gen-data ran
        code = run_cli(["train-detector", "--config", str(cfg)])
        assert code == 4
        err = capsys.readouterr().err
        assert err.startswith("gridkp: error: missing:") and err.count("\n") == 1

    def test_predict_without_checkpoints_exits_4(self, tmp_path):
        cfg = write_config(tmp_path)
        assert run_cli(["gen-data", "--config", str(cfg)]) == 0
        assert run_cli(["predict", "--config", str(cfg)]) == 4

    def test_eval_without_predictions_exits_4(self, tmp_path):
        cfg = write_config(tmp_path)
        assert run_cli(["gen-data", "--config", str(cfg)]) == 0
        assert run_cli(["train-detector", "--config", str(cfg)]) == 0
        assert run_cli(["train-predictor", "--config", str(cfg)]) == 0
        assert run_cli(["eval", "--config", str(cfg)]) == 4


class TestPipeline:
    def test_full_small_pipeline(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert run_cli(["gen-data", "--config", str(cfg)]) == 0
        assert run_cli(["train-detector", "--config", str(cfg)]) == 0
        assert run_cli(["train-predictor", "--config", str(cfg)]) == 0
        assert run_cli(["predict", "--config", str(cfg), "--samples", "1", "--seed", "3"]) == 0
        assert run_cli(["eval", "--config", str(cfg)]) == 0
        run_dir = tmp_path / "run"
        assert (run_dir / "reports" / "metrics_per_frame.csv").exists()
        assert (run_dir / "logs" / "detector.csv").exists()

    def test_predict_deterministic_given_seed(self, tmp_path):
        from gridkp import data as gdata

        cfg = write_config(tmp_path)
        run_cli(["gen-data", "--config", str(cfg)])
        run_cli(["train-detector", "--config", str(cfg)])
        run_cli(["train-predictor", "--config", str(cfg)])
        out_a = tmp_path / "pred_a"
        out_b = tmp_path / "pred_b"
        run_cli(["predict", "--config", str(cfg), "--seed", "7", "--out", str(out_a)])
        run_cli(["predict", "--config", str(cfg), "--seed", "7", "--out", str(out_b)])
        ta, _ = gdata.load_grid_tracks(out_a / "tracks_sample_000.npz")
        tb, _ = gdata.load_grid_tracks(out_b / "tracks_sample_000.npz")
        assert np.array_equal(ta, tb)
        fa = (out_a / "seq_00000" / "sample_000" / "frame_00000.png").read_bytes()
        fb = (out_b / "seq_00000" / "sample_000" / "frame_00000.png").read_bytes()
        assert fa == fb
