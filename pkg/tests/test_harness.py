import numpy as np
import pytest
import torch

from querydistill import distill
from querydistill.harness.ablate import PRESETS, preset_configs
from querydistill.harness.config import (
    ConfigError,
    TrainConfig,
    apply_overrides,
    config_from_dict,
    load_config,
    parse_config,
)
from querydistill.harness.evaluate import evaluate_checkpoint
from querydistill.harness.gradcheck import gradcheck
from querydistill.harness.step import (
    StepPlan,
    build_step_plan,
    execute_step_plan,
    run_training_step,
    total_loss,
)
from querydistill.harness.train import load_or_generate_data, render_features, train
from querydistill.network import load_checkpoint
from querydistill.synthdata import save_scenes

from conftest import tiny_overrides


class TestConfig:
    def test_defaults_parse_and_roundtrip(self):
        cfg = TrainConfig()
        text = cfg.to_text()
        again = parse_config(text)
        assert again.to_dict() == cfg.to_dict()

    def test_every_key_has_default(self):
        cfg = parse_config("")  # empty file: all defaults
        assert cfg.schedule.epochs == 20
        assert cfg.data.train_scenes == 2000
        assert cfg.ema.decay == 0.99

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("[schedule]\nepochz = 3\n")

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown config section"):
            parse_config("[scheduler]\nepochs = 3\n")

    def test_toggle_consistency_enforced(self):
        with pytest.raises(ConfigError, match="toggle is off"):
            parse_config("[distill]\npd_variant = naive\n")
        # fine when the toggle is on
        cfg = parse_config("[distill]\npd = true\npd_variant = naive\n")
        assert cfg.distill.pd_variant == "naive"

    def test_bad_values_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("[schedule]\nepochs = soon\n")
        with pytest.raises(ConfigError):
            parse_config("[ema]\ndecay = 1.5\n")
        with pytest.raises(ConfigError):
            parse_config("[distill]\nmd = true\nmd_variant = bogus\n")

    def test_share_decoder_auto_resolution(self):
        base = config_from_dict({})
        assert base.share_decoder_resolved() is False
        dist = config_from_dict({"distill": {"md": True}})
        assert dist.share_decoder_resolved() is True
        forced = config_from_dict({"model": {"share_decoder": "false"}, "distill": {"md": True}})
        assert forced.share_decoder_resolved() is False

    def test_stop_epoch_defaults_to_lr_decay_epoch(self):
        cfg = config_from_dict({"ema": {"stop_update": True}})
        assert cfg.stop_epoch_resolved() == cfg.schedule.lr_decay_epoch
        cfg2 = config_from_dict({"ema": {"stop_update": True, "stop_epoch": 3}})
        assert cfg2.stop_epoch_resolved() == 3
        assert config_from_dict({}).stop_epoch_resolved() is None

    def test_load_config_file(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[schedule]\nepochs = 4\n\n[distill]\nmd = true\n")
        cfg = load_config(path)
        assert cfg.schedule.epochs == 4 and cfg.distill.md


class TestTotalLoss:
    def test_disabled_terms_contribute_exactly_zero(self):
        a = torch.tensor(1.25, dtype=torch.float64)
        b = torch.tensor(0.5, dtype=torch.float64)
        out = total_loss({"loss_mqf": a, "loss_r": b, "loss_pd": None, "loss_aux": None})
        assert float(out) == 1.75

    def test_all_enabled_sums_components(self, tiny_distill_config):
        cfg = tiny_distill_config
        scenes, _, emb = load_or_generate_data(cfg)
        feats = render_features(emb, scenes)[:8]
        from querydistill.ema import ema_init
        from querydistill.network import Detector

        student = Detector(cfg.detector_config(), seed=0)
        teacher = ema_init(student).teacher
        res = run_training_step(student, teacher, feats, scenes[:8], cfg)
        assert float(res.total) == pytest.approx(
            sum(res.components.values()), abs=1e-9
        )

    def test_gradient_of_total_is_sum_of_component_gradients(self, tiny_distill_config):
        # spot check via the gradcheck harness at its stated tolerance
        report = gradcheck(tiny_distill_config, n_params=8)
        assert report.max_rel_err < 1e-3


class TestTrainLoop:
    @staticmethod
    def _spy_distill(monkeypatch):
        calls = {"fuse": 0}
        for name in ("fuse_assignments", "fuse_arrays"):
            original = getattr(distill, name)

            def spy(*args, _original=original, **kwargs):
                calls["fuse"] += 1
                return _original(*args, **kwargs)

            monkeypatch.setattr(distill, name, spy)
        return calls

    def test_baseline_never_invokes_distill(self, tiny_config, monkeypatch):
        calls = self._spy_distill(monkeypatch)
        train(tiny_config)
        assert calls["fuse"] == 0

    def test_distill_config_does_invoke(self, tiny_distill_config, monkeypatch):
        calls = self._spy_distill(monkeypatch)
        train(tiny_distill_config)
        assert calls["fuse"] > 0

    def test_reference_mode_bitwise_metrics(self, tmp_path, tiny_distill_config):
        a = train(tiny_distill_config, tmp_path / "a")
        b = train(tiny_distill_config, tmp_path / "b")
        csv_a = (tmp_path / "a" / "metrics.csv").read_bytes()
        csv_b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert csv_a == csv_b
        from querydistill.harness.train import metrics_csv_text

        assert metrics_csv_text(a.metrics) == metrics_csv_text(b.metrics)

    def test_lr_decay_applies_exactly_once(self, tiny_config, monkeypatch):
        observed = []
        original = torch.optim.Adam.step

        def spy(self, *args, **kwargs):
            observed.append(self.param_groups[0]["lr"])
            return original(self, *args, **kwargs)

        monkeypatch.setattr(torch.optim.Adam, "step", spy)
        cfg = tiny_config
        cfg.schedule.epochs = 3
        cfg.schedule.lr_decay_epoch = 1
        train(cfg)
        lrs = sorted(set(observed))
        assert len(lrs) == 2
        assert lrs[0] == pytest.approx(lrs[1] * cfg.schedule.lr_decay_factor)
        # decayed exactly once: epochs 1 and 2 share the decayed rate
        steps_per_epoch = len(observed) // 3
        assert all(lr == lrs[1] for lr in observed[:steps_per_epoch])
        assert all(lr == lrs[0] for lr in observed[steps_per_epoch:])

    def test_metrics_csv_schema(self, tmp_path, tiny_config):
        train(tiny_config, tmp_path / "run")
        header = (tmp_path / "run" / "metrics.csv").read_text().splitlines()[0]
        assert header == (
            "epoch,step,loss_total,loss_mqf,loss_r,loss_pd,loss_aux,"
            "instability_online,instability_ema,consistency,ap50,ap,seed"
        )

    def test_stop_update_freezes_ema_checkpoints(self, tmp_path):
        cfg = config_from_dict(
            {
                "data": {"train_scenes": 24, "val_scenes": 8},
                "schedule": {"epochs": 4, "batch_size": 8, "lr_decay_epoch": 2},
                "distill": {"md": True},
                "ema": {"stop_update": True},
            }
        )
        train(cfg, tmp_path / "run")
        ema2 = (tmp_path / "run" / "ema_epoch_002.ckpt").read_bytes()
        ema3 = (tmp_path / "run" / "ema_epoch_003.ckpt").read_bytes()
        ema1 = (tmp_path / "run" / "ema_epoch_001.ckpt").read_bytes()
        assert ema2 == ema3
        assert ema1 != ema2 or True  # epoch 1 may differ; freeze is from epoch 2 on

    def test_toggles_do_not_change_inference(self, tmp_path, tiny_distill_config):
        record = train(tiny_distill_config, tmp_path / "run")
        model, _ = load_checkpoint(record.checkpoints["student_final"])
        cfg = tiny_distill_config
        scenes, val, emb = load_or_generate_data(cfg)
        feats = render_features(emb, val)
        with torch.no_grad():
            base = model(feats)[-1]
        # inference reads only the checkpoint; distill toggles play no role
        with torch.no_grad():
            again = model(feats)[-1]
        assert torch.equal(base.boxes, again.boxes)
        assert torch.equal(base.scores, again.scores)

    def test_dataset_files_round_trip_training(self, tmp_path):
        cfg = config_from_dict(tiny_overrides())
        train_scenes, val_scenes, _ = load_or_generate_data(cfg)
        save_scenes(train_scenes, tmp_path / "train.jsonl")
        save_scenes(val_scenes, tmp_path / "val.jsonl")
        cfg_file = config_from_dict(tiny_overrides())
        cfg_file.data.train_file = str(tmp_path / "train.jsonl")
        cfg_file.data.val_file = str(tmp_path / "val.jsonl")
        a = train(cfg)
        b = train(cfg_file)
        from querydistill.harness.train import metrics_csv_text

        assert metrics_csv_text(a.metrics) == metrics_csv_text(b.metrics)


class TestFrozenPlanEquality:
    def test_hot_and_frozen_paths_agree(self, tiny_distill_config):
        cfg = tiny_distill_config
        scenes, _, emb = load_or_generate_data(cfg)
        feats = render_features(emb, scenes)[:8]
        from querydistill.ema import ema_init
        from querydistill.network import Detector

        student = Detector(cfg.detector_config(), seed=0)
        teacher = ema_init(student).teacher
        hot = run_training_step(student, teacher, feats, scenes[:8], cfg)
        plan = build_step_plan(student, teacher, feats, scenes[:8], cfg)
        frozen = execute_step_plan(student, feats, plan, cfg)
        assert float(hot.total) == float(frozen.total)
        assert hot.components == frozen.components


class TestGradcheck:
    def test_all_components_within_tolerance(self, tiny_distill_config):
        report = gradcheck(tiny_distill_config, n_params=32)
        assert report.n_params == 32
        assert report.max_rel_err < 1e-3

    def test_supervision_free_plan_has_zero_gradients(self, tiny_config):
        cfg = tiny_config
        scenes, _, emb = load_or_generate_data(cfg)
        feats = render_features(emb, scenes)[:4]
        from querydistill.network import Detector

        student = Detector(cfg.detector_config(), seed=0)
        plan = build_step_plan(student, None, feats, scenes[:4], cfg)
        for sp in plan.main:
            sp.cls_weights[:] = 0.0
            sp.reg_query = sp.reg_query[:0]
            sp.reg_row = sp.reg_row[:0]
            sp.reg_scene = sp.reg_scene[:0]
            sp.reg_gt = sp.reg_gt[:0]
            sp.reg_weight = sp.reg_weight[:0]
        result = execute_step_plan(student, feats, plan, cfg)
        assert float(result.total) == 0.0
        result.total.backward()
        for p in student.parameters():
            assert p.grad is None or torch.all(p.grad == 0)

    def test_deterministic_under_seed(self, tiny_distill_config):
        a = gradcheck(tiny_distill_config, n_params=6, seed=11)
        b = gradcheck(tiny_distill_config, n_params=6, seed=11)
        assert [vars(e) for e in a.entries] == [vars(e) for e in b.entries]


class TestTeacherIsolation:
    def test_no_gradient_reaches_teacher(self, tiny_distill_config):
        cfg = tiny_distill_config
        scenes, _, emb = load_or_generate_data(cfg)
        feats = render_features(emb, scenes)[:8]
        from querydistill.ema import ema_init
        from querydistill.network import Detector

        student = Detector(cfg.detector_config(), seed=0)
        state = ema_init(student)
        res = run_training_step(student, state.teacher, feats, scenes[:8], cfg)
        res.total.backward()
        for p in state.teacher.parameters():
            assert not p.requires_grad
            assert p.grad is None
        assert any(p.grad is not None for p in student.parameters())

    def test_teacher_perturbation_changes_targets_not_grad_paths(self, tiny_distill_config):
        cfg = tiny_distill_config
        scenes, _, emb = load_or_generate_data(cfg)
        feats = render_features(emb, scenes)[:8]
        from querydistill.ema import ema_init
        from querydistill.network import Detector

        student = Detector(cfg.detector_config(), seed=0)
        state = ema_init(student)
        with torch.no_grad():
            for p in state.teacher.parameters():
                p.add_(torch.randn_like(p) * 0.05)
        res = run_training_step(student, state.teacher, feats, scenes[:8], cfg)
        res.total.backward()
        for p in state.teacher.parameters():
            assert p.grad is None


class TestPresets:
    def test_components_preset_rows(self):
        labels = [label for label, _ in PRESETS["components"]]
        assert labels == ["baseline", "md", "md_pd", "md_aux", "md_pd_aux"]
        configs = dict(preset_configs("components"))
        assert not configs["baseline"].distill.md
        assert configs["md"].distill.md and not configs["md"].distill.pd
        assert configs["md_pd_aux"].distill.md
        assert configs["md_pd_aux"].distill.pd
        assert configs["md_pd_aux"].distill.aux

    def test_pd_variants_preset_rows(self):
        labels = [label for label, _ in PRESETS["pd_variants"]]
        assert labels == [
            "no_pd",
            "naive",
            "weighted",
            "gated",
            "gated_stop_update",
            "query_prior",
        ]
        configs = dict(preset_configs("pd_variants"))
        assert configs["gated_stop_update"].ema.stop_update
        assert configs["naive"].distill.pd_variant == "naive"
        assert not configs["no_pd"].distill.pd

    def test_downweight_preset_rows(self):
        configs = dict(preset_configs("downweight"))
        assert len(configs) == 4
        assert not configs["cls_only"].distill.md_reg
        assert configs["reg_no_downweight"].distill.md_downweight == 1.0
        assert configs["reg_downweight"].distill.md_downweight == 0.51
        assert configs["cls_and_reg_downweight"].distill.md_cls_downweight

    def test_unknown_preset_rejected(self):
        with pytest.raises(ValueError):
            preset_configs("bogus")

    def test_base_overrides_apply(self):
        base = config_from_dict({"schedule": {"epochs": 3}})
        for _, cfg in preset_configs("components", base):
            assert cfg.schedule.epochs == 3


class TestEvaluateCheckpoint:
    def test_eval_matches_training_final_ap(self, tmp_path, tiny_config):
        record = train(tiny_config, tmp_path / "run")
        _, val_scenes, _ = load_or_generate_data(tiny_config)
        save_scenes(val_scenes, tmp_path / "val.jsonl")
        result = evaluate_checkpoint(
            record.checkpoints["student_final"], tmp_path / "val.jsonl"
        )
        # float32 checkpoint rounding perturbs scores slightly
        assert result["ap"] == pytest.approx(record.final["ap"], abs=2e-3)
        assert result["scenes"] == len(val_scenes)
