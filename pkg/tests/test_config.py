import dataclasses

import pytest

from atgnn.config import (
    PRESETS,
    DataConfig,
    RunConfig,
    model_config_from_dict,
    parse_config,
    pyramid_med,
    pyramid_s,
    serialize_config,
    tiny_model,
    tiny_train,
)
from atgnn.errors import ConfigError


def tiny_run():
    return RunConfig(tiny_model(), tiny_train(), DataConfig("train.jsonl", "eval.jsonl", "vocab.json", "out"))


class TestFileFormat:
    def test_round_trip(self):
        text = serialize_config(tiny_run())
        parsed = parse_config(text)
        assert parsed == tiny_run()
        assert serialize_config(parsed) == text

    def test_partial_file_uses_defaults(self):
        cfg = parse_config("[model]\nnum_classes = 5\nbase_k = 3\n")
        assert cfg.model.num_classes == 5 and cfg.model.base_k == 3
        assert cfg.train.lr0 == 5e-4 and cfg.train.warmup_iters == 1000

    def test_int_accepted_for_float(self):
        cfg = parse_config("[train]\nlr0 = 1\n")
        assert cfg.train.lr0 == 1.0 and isinstance(cfg.train.lr0, float)

    @pytest.mark.parametrize(
        "text, field",
        [
            ("[model]\nbase_k = \"nine\"\n", "model.base_k"),
            ("[model]\nwidth = 3\n", "model.width"),
            ("[nonsense]\na = 1\n", "nonsense"),
            ("[model]\nbase_k = nine\n", "model.base_k"),
            ("[model]\ndims = [32, 64]\n", "stage_pgn"),
            ("[model]\nvariant = \"huge\"\n", "variant"),
            ("[train]\nbatch_size = 0\n", "batch_size"),
            ("[train]\nmixup_prob = 1.5\n", "mixup_prob"),
            ("[model]\ninput_frames = 100\n", "input_frames"),
            ("[train]\naugment = 1\n", "train.augment"),
        ],
    )
    def test_errors_name_the_field(self, text, field):
        with pytest.raises(ConfigError) as info:
            parse_config(text)
        assert info.value.field == field

    def test_mask_larger_than_input(self):
        text = serialize_config(dataclasses.replace(tiny_run(), train=dataclasses.replace(tiny_train(), max_time_mask=100)))
        with pytest.raises(ConfigError) as info:
            parse_config(text)
        assert info.value.field == "max_time_mask"

    def test_model_dict(self):
        cfg = model_config_from_dict(dataclasses.asdict(tiny_model()))
        assert cfg == tiny_model()


class TestPresets:
    def test_all_presets_validate(self):
        for make in PRESETS.values():
            make().validate()

    def test_pyramid_structure(self):
        s, m = pyramid_s(), pyramid_med()
        assert s.dims == [80, 160, 400, 640] and s.stage_pgn == [2, 2, 6, 2]
        assert m.dims == [96, 192, 384, 768] and m.stage_pgn == [2, 2, 16, 2]
        assert s.total_reduction == 32 and s.reduction == 4

    def test_tiny_shape(self):
        t = tiny_model()
        assert (t.input_frames, t.input_bins, t.dims, t.stage_pgn, t.stage_mlg) == (64, 64, [32], [2], [1])
        assert t.reduction == 16
