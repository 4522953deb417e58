"""One-hot prompt encoding, injection mechanics, and prompt auto-derivation."""

import numpy as np
import pytest

from mediqa.errors import (ConfigurationError, DimensionError, VocabularyError)
from mediqa.numcore import Tensor
from mediqa.prompt import (InjectionLayer, PROMPT_LENGTH, PromptVector,
                           auto_generate, encode_prompts, inject)
from mediqa.salient import Volume


class TestEncoding:
    def test_ct_chest_lung_window_positions(self):
        encoded = encode_prompts("3D", "CT", "chest", "lung-window")
        assert np.nonzero(encoded)[0].tolist() == [1, 2, 6, 15]

    def test_other_buckets_positions(self):
        encoded = encode_prompts("2D", "other", "other", "none")
        assert np.nonzero(encoded)[0].tolist() == [0, 5, 11, 18]

    def test_every_valid_combination_sums_to_four(self):
        from mediqa.prompt import DIMS, MODALITIES, REGIONS, TYPES
        for dim in DIMS:
            for modality in MODALITIES:
                for region in REGIONS:
                    for type_ in TYPES:
                        encoded = encode_prompts(dim, modality, region, type_)
                        assert encoded.sum() == 4.0
                        assert encoded.shape == (PROMPT_LENGTH,)
                        assert set(np.unique(encoded)) <= {0.0, 1.0}

    def test_unknown_label_lists_vocabulary(self):
        with pytest.raises(VocabularyError) as exc:
            encode_prompts("2D", "XR", "chest", "none")
        assert "CT" in str(exc.value) and "other" in str(exc.value)

    def test_prompt_vector_dataclass(self):
        pv = PromptVector(dim="2D", modality="MR", region="brain", type="T1")
        assert np.nonzero(pv.encoded())[0].tolist() == [0, 3, 7, 12]


class TestInjection:
    def test_zero_map_is_exact_identity(self, rng):
        layer = InjectionLayer(8, rng)
        layer.zero_()
        x = rng.normal(size=(2, 5, 8))
        p = encode_prompts("2D", "CT", "chest", "none")
        out = inject(Tensor(x), p, layer)
        np.testing.assert_array_equal(out.data, x)

    def test_zero_vector_zero_bias_is_identity(self, rng):
        layer = InjectionLayer(8, rng)
        layer.bias.data[:] = 0.0
        x = rng.normal(size=(1, 3, 8))
        out = inject(Tensor(x), np.zeros(PROMPT_LENGTH), layer)
        np.testing.assert_array_equal(out.data, x)

    def test_prompt_difference_matches_linear_map(self, rng):
        layer = InjectionLayer(6, rng)
        x = Tensor(rng.normal(size=(2, 4, 6)))
        p1 = encode_prompts("2D", "CT", "chest", "lung-window")
        p2 = encode_prompts("3D", "MR", "brain", "T2")
        delta = inject(x, p1, layer).data - inject(x, p2, layer).data
        expected = ((p1 - p2) @ layer.weight.data)[None, None, :]
        np.testing.assert_allclose(delta, np.broadcast_to(expected, delta.shape),
                                   atol=1e-12)

    def test_affine_in_prompt(self, rng):
        # inject(x, p1+p2-p3) - inject(x, p1) equals the linear map of p2-p3
        layer = InjectionLayer(5, rng)
        x = Tensor(rng.normal(size=(1, 2, 5)))
        p1, p2, p3 = (rng.uniform(0, 1, PROMPT_LENGTH) for _ in range(3))
        lhs = inject(x, p1 + p2 - p3, layer).data - inject(x, p1, layer).data
        rhs = ((p2 - p3) @ layer.weight.data)[None, None, :]
        np.testing.assert_allclose(lhs, np.broadcast_to(rhs, lhs.shape),
                                   atol=1e-12)

    def test_same_shift_for_every_token(self, rng):
        layer = InjectionLayer(4, rng)
        x = np.zeros((2, 6, 4))
        out = inject(Tensor(x), encode_prompts("2D", "MR", "brain", "T1"),
                     layer).data
        for b in range(2):
            for t in range(6):
                np.testing.assert_array_equal(out[b, t], out[0, 0])

    def test_layers_are_independent(self, rng):
        first = InjectionLayer(4, rng)
        second = InjectionLayer(4, rng)
        p = encode_prompts("2D", "CT", "chest", "none")
        before = second.project(p).data.copy()
        first.weight.data[:] += 100.0
        np.testing.assert_array_equal(second.project(p).data, before)

    def test_shape_preserved_and_validated(self, rng):
        layer = InjectionLayer(8, rng)
        x = Tensor(rng.normal(size=(3, 7, 8)))
        assert inject(x, encode_prompts("2D", "CT", "chest", "none"),
                      layer).shape == (3, 7, 8)
        with pytest.raises(DimensionError):
            inject(x, np.zeros(7), layer)

    def test_none_prompt_matches_zeroed_layer_bitwise(self, rng):
        layer = InjectionLayer(8, rng)
        x = rng.normal(size=(1, 4, 8))
        off = inject(Tensor(x), None, layer).data
        layer.zero_()
        zeroed = inject(Tensor(x), encode_prompts("2D", "CT", "chest", "none"),
                        layer).data
        assert np.array_equal(off, zeroed)
        assert off.tobytes() == zeroed.tobytes()


class _StubClassifier:
    """Fixed-output classifier for precedence tests."""

    class cfg:
        img_size = 16

    def classify(self, image):
        modality = np.zeros(4)
        modality[0] = 1.0   # CT
        region = np.zeros(6)
        region[1] = 1.0     # brain
        type_ = np.zeros(7)
        type_[6] = 1.0      # none
        return {"modality": modality, "region": region, "type": type_}


class TestAutoGenerate:
    def test_volume_is_3d_regardless_of_classifier(self, rng):
        vol = Volume(rng.uniform(0, 1, size=(8, 8, 5)))
        pv = auto_generate(vol, classifier=_StubClassifier())
        assert pv.dim == "3D"

    def test_single_slice_volume_and_image_are_2d(self, rng):
        vol = Volume(rng.uniform(0, 1, size=(8, 8, 1)))
        assert auto_generate(vol, classifier=_StubClassifier()).dim == "2D"
        img = rng.uniform(0, 1, size=(8, 8))
        assert auto_generate(img, classifier=_StubClassifier()).dim == "2D"

    def test_classifier_fields_flow_through(self, rng):
        pv = auto_generate(rng.uniform(0, 1, (8, 8)),
                           classifier=_StubClassifier())
        assert (pv.modality, pv.region, pv.type) == ("CT", "brain", "none")

    def test_manifest_mode_overrides_classifier(self, rng):
        hints = {"modality": "MR", "region": "breast", "type": "T2"}
        pv = auto_generate(rng.uniform(0, 1, (8, 8)),
                           classifier=_StubClassifier(), hints=hints,
                           mode="manifest")
        assert (pv.modality, pv.region, pv.type) == ("MR", "breast", "T2")

    def test_hints_fill_in_when_classifier_missing(self, rng):
        hints = {"modality": "fundus", "region": "retina",
                 "type": "color-fundus"}
        pv = auto_generate(rng.uniform(0, 1, (8, 8)), hints=hints)
        assert pv.modality == "fundus"

    def test_no_source_raises_configuration_error(self, rng):
        with pytest.raises(ConfigurationError):
            auto_generate(rng.uniform(0, 1, (8, 8)))
