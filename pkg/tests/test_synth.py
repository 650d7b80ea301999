import numpy as np
import pytest

from panomamba import synth
from panomamba.tensor import ContractError


class TestSynthPanorama:
    @pytest.mark.parametrize("index", range(6))
    def test_wrap_seam_tight(self, index):
        spec = synth.random_scene_spec(index, base_seed=3)
        img, _ = synth.synth_panorama(spec, 128, 64)
        assert np.max(np.abs(img.rgb[:, 0] - img.rgb[:, -1])) <= 1 / 255

    def test_deterministic(self):
        spec = synth.random_scene_spec(2, base_seed=0)
        a, cap_a = synth.synth_panorama(spec, 128, 64)
        b, cap_b = synth.synth_panorama(spec, 128, 64)
        assert np.array_equal(a.np, b.np) and cap_a == cap_b

    @pytest.mark.parametrize("index", range(8))
    def test_component_count_matches_spec(self, index):
        spec = synth.random_scene_spec(index, base_seed=7)
        mask = synth.object_pixel_mask(spec, 128, 64)
        assert synth.count_components_wrap(mask) == spec.object_count

    def test_caption_template(self):
        spec = synth.SynthSceneSpec(seed=1, palette="warm", horizon_deg=-10.0, object_count=3)
        _, cap = synth.synth_panorama(spec, 64, 32)
        assert cap == "a warm scene with 3 boxes"

    def test_values_in_unit_range(self):
        spec = synth.random_scene_spec(0, base_seed=0)
        img, _ = synth.synth_panorama(spec, 128, 64)
        assert img.np.min() >= 0.0 and img.np.max() <= 1.0
        assert np.all(img.mask == 1.0)

    def test_bad_aspect_rejected(self):
        spec = synth.random_scene_spec(0, base_seed=0)
        with pytest.raises(ContractError):
            synth.synth_panorama(spec, 100, 64)

    def test_unknown_palette_rejected(self):
        with pytest.raises(ContractError):
            synth.synth_panorama(
                synth.SynthSceneSpec(0, "neon", -10.0, 1), 64, 32
            )


class TestComponentCounter:
    def test_wrap_aware(self):
        mask = np.zeros((4, 8), dtype=bool)
        mask[1, 0] = mask[1, 7] = True  # one component across the seam
        assert synth.count_components_wrap(mask) == 1

    def test_diagonals_not_connected(self):
        mask = np.zeros((4, 8), dtype=bool)
        mask[0, 0] = mask[1, 1] = True
        assert synth.count_components_wrap(mask) == 2

    def test_empty(self):
        assert synth.count_components_wrap(np.zeros((3, 6), dtype=bool)) == 0
