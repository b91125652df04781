import json

import pytest

from bevinst.config import RunConfig, config_from_dict, load_config
from bevinst.errors import DimensionMismatch, InvalidConfig, ParseError
from bevinst.params import ParamRegistry, init_params
from bevinst.pipeline import oracle_registry

SMALL = {"channels": 16, "heads": 4, "layers": 2, "n_beta": 20, "n_gamma": 10}


class TestConfig:
    def test_defaults(self):
        c = RunConfig().validate()
        assert (c.k, c.t_chi, c.eta, c.lam, c.tau) == (6, 3, 3.0, 0.6, 0.5)
        assert (c.bev.grid_height, c.bev.grid_width, c.bev.voxel_size) == (128, 128, 0.8)
        assert tuple(c.bev.range_min) == (-51.2, -51.2)
        assert (c.n_beta, c.n_gamma, c.layers, c.output_count, c.nms_threshold) == (450, 450, 6, 300, 0.1)

    def test_shared_fields_reach_scene(self):
        c = config_from_dict({"channels": 16, "heads": 4, "tau": 0.25})
        assert c.scene.channels == 16 and c.scene.tau == 0.25

    @pytest.mark.parametrize("value", [0.0, 1.0, -0.3, 1.7])
    def test_lambda_out_of_range(self, value):
        with pytest.raises(InvalidConfig) as exc:
            config_from_dict({"lambda": value})
        assert exc.value.field == "lambda"

    @pytest.mark.parametrize(
        "data, field",
        [
            ({"colour": 1}, "colour"),
            ({"bev": {"cells": 3}}, "bev.cells"),
            ({"heads": 5}, "heads"),
            ({"t_chi": 4}, "t_chi"),
            ({"eta": "x"}, "eta"),
            ({"scene": {"channels": 8}, "channels": 16, "heads": 4}, "scene.channels"),
        ],
    )
    def test_invalid_fields_named(self, data, field):
        with pytest.raises(InvalidConfig) as exc:
            config_from_dict(data)
        assert exc.value.field == field

    def test_round_trip(self):
        c = config_from_dict(SMALL)
        assert config_from_dict(json.loads(c.dumps())).dumps() == c.dumps()

    def test_load_config(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps(SMALL))
        assert load_config(path).channels == 16
        assert load_config(None).channels == RunConfig().channels
        path.write_text('{\n "channels": 16,\n}')
        with pytest.raises(ParseError) as exc:
            load_config(path)
        assert exc.value.line == 3


class TestRegistry:
    def test_block_names(self):
        reg = init_params(config_from_dict(SMALL))
        names = reg.names()
        assert {"bev.depth", "bev.temporal", "proposal.head", "adaptor.converter", "adaptor.potential"} <= set(names)
        assert reg.num_layers() == 2
        for i in range(2):
            for part in ("attn", "embed", "offset", "weight", "inner", "outer", "enc", "reg", "cls"):
                assert f"branch.layer{i}.{part}" in reg
        assert "branch.layer2.cls" not in reg

    def test_save_load_bit_exact(self, tmp_path):
        reg = init_params(config_from_dict(SMALL), seed=3)
        reg.save(tmp_path / "p.bin")
        again = ParamRegistry.load(tmp_path / "p.bin")
        assert again.dumps() == reg.dumps()
        for name in reg.names():
            for key, arr in reg.block(name).arrays.items():
                assert again.block(name).arrays[key].tobytes() == arr.tobytes()

    def test_seeded(self):
        c = config_from_dict(SMALL)
        assert init_params(c, seed=1).dumps() == init_params(c, seed=1).dumps()
        assert init_params(c, seed=1).dumps() != init_params(c, seed=2).dumps()

    def test_dimensions_follow_channels(self):
        for ch in (16, 24, 32):
            c = config_from_dict({**SMALL, "channels": ch})
            reg = init_params(c)
            reg.audit(c)
            assert reg.linear("proposal.head").weights.shape == (11, ch)
            assert reg.linear("branch.layer0.offset").weights.shape == (2 * c.k * (c.t_chi + 1), ch)
            assert reg.potential("adaptor.potential").features.shape == (10, ch)
            assert reg.mlp("branch.layer1.enc")[0][0].weights.shape == (ch, 2 * ch)

    def test_audit_catches_channel_change(self):
        reg = init_params(config_from_dict(SMALL))
        with pytest.raises(DimensionMismatch, match="expected shape"):
            reg.audit(config_from_dict({**SMALL, "channels": 24}))

    def test_audit_catches_missing_block(self):
        c = config_from_dict(SMALL)
        reg = init_params(c)
        del reg.blocks["branch.layer1.cls"]
        with pytest.raises(DimensionMismatch, match="branch.layer1.cls"):
            reg.audit(c)

    def test_bad_magic(self):
        with pytest.raises(ParseError):
            ParamRegistry.loads(b"NOPE" + bytes(20))

    def test_missing_block_lookup(self):
        with pytest.raises(KeyError, match="nope"):
            ParamRegistry().linear("nope")

    def test_oracle_registry_passes_audit(self):
        c = RunConfig().validate()
        reg = oracle_registry(c)
        reg.audit(c)
        assert reg.num_layers() == c.layers
