"""Config text parsing and the binary checkpoint container."""
import numpy as np
import pytest

from naslora.checkpoint import (MAGIC, collect_state, read_checkpoint,
                                restore_state, save_training_state,
                                write_checkpoint)
from naslora.config import RunConfig, load_config, parse_config, to_text
from naslora.errors import CheckpointError, ConfigError
from naslora.model import params_checksum
from naslora.optim import AdamState, adam_step
from naslora.train import stage_wise_train
from test_train import tiny_model, tiny_provider, tiny_train_cfg


class TestConfigDefaults:
    def test_empty_text_gives_defaults(self):
        cfg = parse_config("")
        assert cfg.name == "run"
        assert cfg.out_dir == "runs"
        assert cfg.model.image_size == 64
        assert cfg.model.patch_size == 8
        assert cfg.model.embed_dim == 64
        assert cfg.model.depth == 4
        assert cfg.model.heads == 4
        assert cfg.model.num_queries == 8
        assert cfg.model.num_classes == 1
        assert cfg.model.variant == "nas_pc_lora"
        assert cfg.model.adapter_layers == (1, 2, 3, 4)
        assert cfg.model.rank == 3
        assert cfg.model.channel_ratio == 2.0 / 3.0
        assert cfg.model.mlp_ratio == 2
        assert cfg.model.pixel_channels == 16
        assert cfg.train.epochs == 40
        assert cfg.train.arch_warmup == 10
        assert cfg.train.lr_w == 1e-4
        assert cfg.train.wd_w == 1e-4
        assert cfg.train.lr_alpha == 1e-3
        assert cfg.train.wd_alpha == 1e-3
        assert cfg.train.lambda_seg == 1.0
        assert cfg.train.lambda_cls == 2.0
        assert cfg.train.batch == 4
        assert cfg.train.flip_augment is True
        assert cfg.data.train_size == 200
        assert cfg.data.val_size == 40

    def test_overrides(self):
        text = """
[run]
name = exp1
[model]
variant = lora
adapter_layers = 3,4
channel_ratio = 1/2
depth = 4
[train]
epochs = 5
arch_warmup = 2
flip_augment = no
[data]
train_size = 16
"""
        cfg = parse_config(text)
        assert cfg.name == "exp1"
        assert cfg.model.variant == "lora"
        assert cfg.model.adapter_layers == (3, 4)
        assert cfg.model.channel_ratio == 0.5
        assert cfg.train.epochs == 5
        assert cfg.train.flip_augment is False
        assert cfg.data.train_size == 16

    def test_data_section_follows_model_geometry(self):
        cfg = parse_config("[model]\nimage_size = 32\npatch_size = 8\nnum_classes = 3\n")
        assert cfg.data.image_size == 32
        assert cfg.data.num_classes == 3

    def test_fraction_ratio_text(self):
        cfg = parse_config("[model]\nchannel_ratio = 2/3\n")
        assert cfg.model.channel_ratio == 2.0 / 3.0


class TestConfigErrors:
    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config("[optimizer]\nlr = 1\n")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("[train]\nlearning_rate = 1\n")

    def test_bad_int(self):
        with pytest.raises(ConfigError, match="bad value"):
            parse_config("[model]\ndepth = four\n")

    def test_bad_bool(self):
        with pytest.raises(ConfigError, match="bad value"):
            parse_config("[train]\nflip_augment = maybe\n")

    def test_validation_failure_becomes_config_error(self):
        with pytest.raises(ConfigError, match="variant"):
            parse_config("[model]\nvariant = dora\n")

    def test_rank_bound_checked(self):
        with pytest.raises(ConfigError):
            parse_config("[model]\nrank = 32\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "absent.ini")


class TestConfigRoundTrip:
    def test_dump_reparses_to_same_values(self):
        cfg = parse_config("[model]\nvariant = nas_lora\nrank = 4\n"
                           "[train]\nepochs = 7\narch_warmup = 3\n"
                           "[run]\nname = rt\n")
        again = parse_config(to_text(cfg))
        assert again == cfg

    def test_default_ratio_dumps_as_fraction(self):
        assert "channel_ratio = 2/3" in to_text(RunConfig())

    def test_load_from_file(self, tmp_path):
        p = tmp_path / "run.ini"
        p.write_text("[train]\nepochs = 12\n", encoding="utf-8")
        assert load_config(p).train.epochs == 12


class TestCheckpointContainer:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(3)
        tensors = {
            "a/weight": rng.normal(size=(3, 4)),
            "b/bias": rng.normal(size=(5,)),
            "c/scalar": np.asarray(2.5),
            "d/cube": rng.normal(size=(2, 3, 2)),
        }
        path = tmp_path / "state.ckpt"
        write_checkpoint(path, "[run]\nname = x\n", tensors)
        text, loaded = read_checkpoint(path)
        assert text == "[run]\nname = x\n"
        assert sorted(loaded) == sorted(tensors)
        for name in tensors:
            np.testing.assert_array_equal(loaded[name], tensors[name])
            assert loaded[name].dtype == np.float64

    def test_file_starts_with_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        write_checkpoint(path, "", {"t": np.zeros(2)})
        assert path.read_bytes()[:8] == MAGIC

    def test_canonical_bytes(self, tmp_path):
        t1 = {"b": np.arange(3.0), "a": np.ones((2, 2))}
        t2 = {"a": np.ones((2, 2)), "b": np.arange(3.0)}
        p1, p2 = tmp_path / "1.ckpt", tmp_path / "2.ckpt"
        write_checkpoint(p1, "cfg", t1)
        write_checkpoint(p2, "cfg", t2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_version_mismatch_rejected(self, tmp_path):
        path = tmp_path / "v.ckpt"
        write_checkpoint(path, "", {"t": np.zeros(1)})
        raw = bytearray(path.read_bytes())
        raw[8] = 9  # version field sits right after the magic
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version 9"):
            read_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            read_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        path = tmp_path / "t.ckpt"
        write_checkpoint(path, "config text", {"t": np.arange(10.0)})
        raw = path.read_bytes()
        for cut in (4, len(raw) // 2, len(raw) - 1):
            path.write_bytes(raw[:cut])
            with pytest.raises(CheckpointError):
                read_checkpoint(path)

    def test_trailing_data_rejected(self, tmp_path):
        path = tmp_path / "tr.ckpt"
        write_checkpoint(path, "", {"t": np.zeros(1)})
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(CheckpointError, match="trailing"):
            read_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="cannot read"):
            read_checkpoint(tmp_path / "absent.ckpt")


class TestTrainingState:
    def _trained(self, seed=0):
        model = tiny_model(variant="nas_pc_lora", seed=seed)
        provider = tiny_provider()
        cfg = tiny_train_cfg(epochs=2, arch_warmup=0)
        opt_w, opt_a = AdamState(), AdamState()
        stage_wise_train(model, provider, cfg, opt_w=opt_w, opt_a=opt_a)
        return model, opt_w, opt_a

    def test_state_round_trip_bitwise(self, tmp_path):
        model, opt_w, opt_a = self._trained()
        path = tmp_path / "train.ckpt"
        save_training_state(path, "cfgtext", model, opt_w, opt_a, epoch=2)

        text, tensors = read_checkpoint(path)
        assert text == "cfgtext"
        # same build seed: the clone's seeded channel masks must match the
        # stored ones, while its fresh weights get overwritten by the load
        clone = tiny_model(variant="nas_pc_lora", seed=0)
        opt_w2, opt_a2, epoch = restore_state(clone, tensors)

        assert epoch == 2
        assert params_checksum(clone.trainable_params()) == \
            params_checksum(model.trainable_params())
        assert params_checksum(clone.frozen_params()) == \
            params_checksum(model.frozen_params())
        assert opt_w2.step_count == opt_w.step_count
        assert sorted(opt_w2.m) == sorted(opt_w.m)
        for name in opt_w.m:
            np.testing.assert_array_equal(opt_w2.m[name], opt_w.m[name])
            np.testing.assert_array_equal(opt_w2.v[name], opt_w.v[name])
        assert opt_a2.step_count == opt_a.step_count

    def test_restored_optimizer_continues_identically(self, tmp_path):
        # one extra optimizer step after a round trip matches the original
        model, opt_w, opt_a = self._trained()
        path = tmp_path / "cont.ckpt"
        save_training_state(path, "", model, opt_w, opt_a, epoch=2)
        _, tensors = read_checkpoint(path)
        clone = tiny_model(variant="nas_pc_lora", seed=0)
        opt_w2, _, _ = restore_state(clone, tensors)

        for m, s in ((model, opt_w), (clone, opt_w2)):
            params = m.weight_params()
            for t in params.values():
                t.grad = np.full_like(t.data, 0.01)
            adam_step(s, params, lr=1e-3, wd=1e-4)
        assert params_checksum(clone.weight_params()) == \
            params_checksum(model.weight_params())

    def test_mask_mismatch_rejected(self, tmp_path):
        model, opt_w, opt_a = self._trained()
        tensors = collect_state(model, opt_w, opt_a, epoch=1)
        name = next(k for k in tensors if k.endswith("/mask"))
        tensors[name] = 1.0 - tensors[name]
        clone = tiny_model(variant="nas_pc_lora", seed=0)
        with pytest.raises(CheckpointError, match="mask"):
            restore_state(clone, tensors)

    def test_missing_tensor_rejected(self):
        model, opt_w, opt_a = self._trained()
        tensors = collect_state(model, opt_w, opt_a, epoch=1)
        key = next(k for k in tensors if k.startswith("decoder/"))
        del tensors[key]
        clone = tiny_model(variant="nas_pc_lora", seed=0)
        with pytest.raises(CheckpointError, match="missing tensor"):
            restore_state(clone, tensors)

    def test_shape_mismatch_rejected(self):
        model, opt_w, opt_a = self._trained()
        tensors = collect_state(model, opt_w, opt_a, epoch=1)
        key = next(k for k in tensors if k.startswith("decoder/"))
        tensors[key] = np.zeros((1, 1))
        clone = tiny_model(variant="nas_pc_lora", seed=0)
        with pytest.raises(CheckpointError, match="shape mismatch"):
            restore_state(clone, tensors)

    def test_unexpected_tensor_rejected(self):
        model, opt_w, opt_a = self._trained()
        tensors = collect_state(model, opt_w, opt_a, epoch=1)
        tensors["mystery/extra"] = np.zeros(3)
        clone = tiny_model(variant="nas_pc_lora", seed=0)
        with pytest.raises(CheckpointError, match="unexpected"):
            restore_state(clone, tensors)
