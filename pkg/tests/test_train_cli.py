"""Optimizer, trainer, checkpoints and the command line."""

import json
import time

import numpy as np
import pytest

from mmdg import checkpoint as ckpt
from mmdg.autodiff import Tensor
from mmdg.cli import main
from mmdg.config import TrainConfig
from mmdg.data import generate_domains
from mmdg.train import Adam, NumericError, Trainer, epoch_batches, load_model
from mmdg.vit import BackboneConfig

from oracles import adam_first_step


def tiny_cfg(**kw):
    base = dict(backbone=BackboneConfig(n_blocks=2), adapter_width=8, batch_size=8, epochs=2,
                data={"n_live": 4, "n_spoof": 4, "seed": 0}, mc_samples=2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_domains(n_live=4, n_spoof=4, seed=0)


class TestAdam:
    def test_first_step_is_lr(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        Adam({"p": p}, lr=0.1).step({"p": np.array([1.0])})
        assert p.data[0] - 2.0 == pytest.approx(-0.1, abs=1e-8)
        assert p.data[0] == pytest.approx(adam_first_step(2.0, 1.0, 0.1), abs=1e-15)

    def test_zero_gradient_leaves_parameter(self):
        p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        Adam({"p": p}, lr=0.1).step({"p": np.zeros(2)})
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_non_finite_gradient_names_parameter(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(NumericError, match="adapter.x"):
            Adam({"adapter.x": p}).step({"adapter.x": np.array([np.inf])})
        assert p.data[0] == 1.0

    def test_decoupled_weight_decay(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        Adam({"p": p}, lr=0.1, weight_decay=0.5).step({"p": np.array([0.0])})
        assert p.data[0] == pytest.approx(0.95, abs=1e-15)


class TestBatching:
    def test_cover_every_sample_once(self):
        batches = epoch_batches(37, 8, seed=1, epoch=2)
        assert sorted(np.concatenate(batches).tolist()) == list(range(37))

    def test_reproducible_and_epoch_dependent(self):
        a = epoch_batches(20, 8, 0, 0)
        assert all(np.array_equal(x, y) for x, y in zip(a, epoch_batches(20, 8, 0, 0)))
        assert not np.array_equal(np.concatenate(a), np.concatenate(epoch_batches(20, 8, 0, 1)))


class TestTrainer:
    def test_losses_reproducible(self, tiny_data):
        a = Trainer(tiny_cfg(), tiny_data).run().losses
        b = Trainer(tiny_cfg(), tiny_data).run().losses
        assert a == b and all(np.isfinite(a))

    def test_seed_changes_losses(self, tiny_data):
        a = Trainer(tiny_cfg(epochs=1), tiny_data).run().losses
        b = Trainer(tiny_cfg(epochs=1, seed=1), tiny_data).run().losses
        assert a != b

    def test_resume_is_bit_identical(self, tiny_data, tmp_path):
        straight = Trainer(tiny_cfg(), tiny_data).run().losses
        first = Trainer(tiny_cfg(), tiny_data, out_dir=tmp_path)
        head = first.run(1).losses
        second = Trainer(tiny_cfg(), tiny_data)
        second.load_checkpoint(tmp_path / "model.ckpt")
        tail = second.run().losses
        assert head + tail == straight

    def test_logs_written(self, tiny_data, tmp_path):
        Trainer(tiny_cfg(epochs=1), tiny_data, out_dir=tmp_path).run()
        steps = [json.loads(x) for x in (tmp_path / "train_log.ndjson").read_text().splitlines()]
        assert {"step", "loss", "ce", "ssp", "ssp_var", "cases", "u_R"} <= set(steps[0])
        epoch = json.loads((tmp_path / "epochs.ndjson").read_text())
        assert {"epoch", "auc", "hter"} <= set(epoch)

    def test_checkpoint_holds_prototypes(self, tiny_data, tmp_path):
        Trainer(tiny_cfg(epochs=1), tiny_data, out_dir=tmp_path).run()
        arrays, meta = ckpt.load(tmp_path / "model.ckpt")
        assert "prototypes.R.live" in arrays and "prototypes.I.spoof_s" in arrays
        model, cfg, _ = load_model(tmp_path / "model.ckpt")
        assert cfg.backbone.n_blocks == 2

    def test_nan_aborts_and_saves_last_good(self, tiny_data, tmp_path):
        t = Trainer(tiny_cfg(epochs=1), tiny_data, out_dir=tmp_path)
        t.model.cls_w.data[...] = np.nan
        with pytest.raises(NumericError, match="step 1"):
            t.run()
        assert (tmp_path / "last_good.ckpt").exists()

    def test_decomposition_logged(self, tiny_data):
        rec = Trainer(tiny_cfg(check_decomposition=True), tiny_data).run(1).step_log
        assert max(r["decomp_err"] for r in rec) <= 1e-9

    @pytest.mark.parametrize("lam,r_e", [(0.0, 1.0), (0.3, 0.0), (0.3, 1.0), (1.0, 3.0)])
    def test_lambda_r_e_sweep(self, tiny_data, lam, r_e):
        t = Trainer(tiny_cfg(epochs=1, lam=lam, r_e=r_e), tiny_data)
        log = t.run().step_log
        assert all(np.isfinite(r["loss"]) for r in log)
        if lam == 0.0:
            assert all(r["loss"] == r["ce"] for r in log)
        assert 0.0 <= t.evaluate()["auc"] <= 1.0

    def test_desk_epoch_budget(self):
        # two source domains of 32 samples each: 64 training samples
        data = generate_domains(("c", "p", "s", "w"), 16, 16, seed=0)
        t0 = time.perf_counter()
        Trainer(TrainConfig(protocol="cw_ps", eval_every=0), data).run(1)
        assert time.perf_counter() - t0 < 60


def _write_cfg(path, **kw):
    tiny_cfg(**kw).save(path)
    return str(path)


class TestCLI:
    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand(self):
        assert main([]) == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.toml")]) == 1

    def test_bad_config_key(self, tmp_path):
        (tmp_path / "c.toml").write_text("learning_rate = 1.0\n")
        assert main(["train", "--config", str(tmp_path / "c.toml")]) == 1

    def test_unknown_protocol(self, tmp_path):
        assert main(["train", "--config", _write_cfg(tmp_path / "c.toml"), "--protocol", "xyz_q"]) == 1

    def test_eval_needs_checkpoint(self):
        assert main(["eval"]) == 1

    def test_protocols(self, capsys):
        assert main(["protocols"]) == 0
        assert len(capsys.readouterr().out.strip().splitlines()) == 18

    def test_config_roundtrip(self, tmp_path):
        assert main(["config", "--paper", "--out", str(tmp_path / "p.toml")]) == 0
        cfg = TrainConfig.load(tmp_path / "p.toml")
        assert cfg.backbone.hidden_c == 768 and cfg.lr == 5e-5

    def test_gen_data(self, tmp_path, capsys):
        assert main(["gen-data", "--config", _write_cfg(tmp_path / "c.toml"), "--out", str(tmp_path / "d")]) == 0
        for d in "cpsw":
            assert (tmp_path / "d" / d / "manifest.tsv").exists()

    def test_train_then_eval_missing(self, tmp_path, capsys):
        cfg = _write_cfg(tmp_path / "c.toml", epochs=1)
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(tmp_path / "run" / "model.ckpt"), "--missing", "d",
                     "--out", str(tmp_path / "ev")]) == 0
        row = json.loads(capsys.readouterr().out)
        assert row["protocol"] == "cps_w_missing_d"
        assert (tmp_path / "ev" / "roc_cps_w_missing_d.csv").exists()
        assert json.loads((tmp_path / "ev" / "report.ndjson").read_text())["n_live"] == 4

    def test_train_resume_flag(self, tmp_path, capsys):
        cfg = _write_cfg(tmp_path / "c.toml", epochs=1)
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert main(["train", "--config", cfg, "--epochs", "2", "--resume", str(tmp_path / "a" / "model.ckpt"),
                     "--out", str(tmp_path / "a")]) == 0
        steps = [json.loads(x)["step"] for x in (tmp_path / "a" / "train_log.ndjson").read_text().splitlines()]
        assert steps == list(range(1, len(steps) + 1))

    def test_ablate_ndjson(self, tmp_path, capsys):
        cfg = _write_cfg(tmp_path / "c.toml", epochs=1)
        assert main(["ablate", "--config", cfg, "--seeds", "1", "--modes", "off,full",
                     "--out", str(tmp_path / "ab")]) == 0
        rows = [json.loads(x) for x in (tmp_path / "ab" / "ablation.ndjson").read_text().splitlines()]
        assert {(r["gate"], r["regrad"]) for r in rows} == {(True, "off"), (True, "full"),
                                                              (False, "off"), (False, "full")}

    def test_ablate_bad_mode(self, tmp_path):
        assert main(["ablate", "--config", _write_cfg(tmp_path / "c.toml"), "--modes", "sometimes"]) == 1

    def test_grad_check_subset(self, capsys):
        assert main(["grad-check", "--seeds", "2", "--cases", "matmul,softmax"]) == 0
        rows = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
        assert all(r["passed"] for r in rows)
