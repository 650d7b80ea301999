import pytest

from panomamba.config import RunConfig, apply_overrides, config_to_text, parse_config_text
from panomamba.tensor import ContractError


class TestParse:
    def test_defaults(self):
        cfg = parse_config_text("")
        assert cfg.T == 1000 and cfg.cfg_scale == 2.5 and cfg.gma_active_scales == (2, 3, 4)

    def test_key_value_lines(self):
        cfg = parse_config_text("T = 500\nbeta_start = 0.001\nn_yaw=8\n")
        assert cfg.T == 500 and cfg.beta_start == 0.001 and cfg.n_yaw == 8

    def test_list_syntax(self):
        cfg = parse_config_text("gma_active_scales = [1,2,3,4]\nunet_widths = [8,16,24,32]")
        assert cfg.gma_active_scales == (1, 2, 3, 4)
        assert cfg.unet_widths == (8, 16, 24, 32)

    def test_comments_and_blanks(self):
        cfg = parse_config_text("# header\n\nT = 100  # trailing\n")
        assert cfg.T == 100

    def test_unknown_key_rejected(self):
        with pytest.raises(ContractError):
            parse_config_text("mystery = 1\n")

    def test_malformed_line_rejected(self):
        with pytest.raises(ContractError):
            parse_config_text("just words\n")

    def test_bool_parse(self):
        assert parse_config_text("scan_parallel = false\n").scan_parallel is False

    def test_invariants_enforced(self):
        with pytest.raises(ContractError):
            parse_config_text("pano_w = 100\npano_h = 64\n")
        with pytest.raises(ContractError):
            parse_config_text("view_size = 48\n")
        with pytest.raises(ContractError):
            parse_config_text("sample_steps = 2000\n")


class TestRoundTrip:
    def test_text_roundtrip(self):
        cfg = RunConfig(T=321, gma_active_scales=(1, 4), seed=9)
        cfg2 = parse_config_text(config_to_text(cfg))
        assert cfg2 == cfg

    def test_overrides_win(self):
        cfg = RunConfig(T=100)
        out = apply_overrides(cfg, {"T": 200, "seed": None})
        assert out.T == 200 and out.seed == cfg.seed

    def test_unknown_override_rejected(self):
        with pytest.raises(ContractError):
            apply_overrides(RunConfig(), {"bogus": 1})
