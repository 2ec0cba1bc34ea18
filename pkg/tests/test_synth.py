import colorsys
import math

import numpy as np
import pytest

from tamiseg.synth_data import (ConfigError, DatasetError, PerturbConfig, Sample,
                                SampleRecord, SynthConfig, generate_dataset,
                                generate_sample, load_dataset, make_prompt, perturb,
                                write_dataset, _hsv_to_rgb, _rgb_to_hsv)

IDENTITY_PERTURB = PerturbConfig(brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0,
                                 grayscale_prob=0.0, blur_sigma=(0.0, 0.0))


def oracle_rasterize_loops(record):
    """Independent per-pixel rasterizer using scalar math functions."""
    mask = np.zeros((record.height, record.width), dtype=np.uint8)
    for y in range(record.height):
        for x in range(record.width):
            for les in record.lesions:
                dy = y - les.center_y
                dx = x - les.center_x
                ca, sa = math.cos(les.angle), math.sin(les.angle)
                u = (dx * ca + dy * sa) / les.radius_x
                v = (-dx * sa + dy * ca) / les.radius_y
                rho = math.hypot(u, v)
                phi = math.atan2(v, u)
                boundary = 1.0
                for k, amp, phase in les.harmonics:
                    boundary += amp * math.cos(k * phi + phase)
                if rho <= boundary:
                    mask[y, x] = 1
                    break
    return mask


def oracle_rasterize_grid(record):
    """Independent vectorized rasterizer built on meshgrid arrays."""
    yy, xx = np.meshgrid(np.arange(record.height, dtype=np.float64),
                         np.arange(record.width, dtype=np.float64), indexing="ij")
    mask = np.zeros((record.height, record.width), dtype=bool)
    for les in record.lesions:
        dy = yy - les.center_y
        dx = xx - les.center_x
        ca, sa = np.cos(les.angle), np.sin(les.angle)
        u = (dx * ca + dy * sa) / les.radius_x
        v = (-dx * sa + dy * ca) / les.radius_y
        rho = np.hypot(u, v)
        phi = np.arctan2(v, u)
        boundary = np.ones_like(rho)
        for k, amp, phase in les.harmonics:
            boundary = boundary + amp * np.cos(k * phi + phase)
        mask |= rho <= boundary
    return mask.astype(np.uint8)


# --- generation ----------------------------------------------------------

def test_zero_lesions_gives_empty_mask_and_no_lesion_prompt():
    cfg = SynthConfig(lesion_count_range=(0, 0))
    image, mask, prompt, record = generate_sample(0, cfg)
    assert mask.sum() == 0
    assert prompt == "no lesion"
    assert record.lesions == ()


def test_generation_deterministic():
    cfg = SynthConfig()
    a = generate_sample(7, cfg)
    b = generate_sample(7, cfg)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])
    assert a[2] == b[2]
    assert a[3] == b[3]


def test_different_seeds_differ():
    cfg = SynthConfig()
    a = generate_sample(1, cfg)
    b = generate_sample(2, cfg)
    assert not np.array_equal(a[0], b[0])


def test_record_rerasterizes_to_stored_mask_scalar_oracle():
    cfg = SynthConfig()
    for seed in range(10):
        _, mask, _, record = generate_sample(seed, cfg)
        assert np.array_equal(mask, oracle_rasterize_loops(record)), f"seed {seed}"


def test_mask_fidelity_and_size_bands_1000_seeds():
    cfg = SynthConfig()
    scale = min(cfg.height, cfg.width)
    for seed in range(1000):
        _, mask, _, record = generate_sample(seed, cfg)
        assert np.array_equal(mask, oracle_rasterize_grid(record)), f"seed {seed}"
        for les in record.lesions:
            lo, hi = cfg.size_bands[les.size_class]
            assert lo * scale <= les.radius_y <= hi * scale
            assert lo * scale <= les.radius_x <= hi * scale


def test_image_contract():
    cfg = SynthConfig()
    image, mask, _, _ = generate_sample(3, cfg)
    assert image.shape == (64, 64, 3)
    assert image.dtype == np.float32
    assert image.min() >= 0.0 and image.max() <= 1.0
    assert mask.shape == (64, 64)
    assert set(np.unique(mask)) <= {0, 1}


def test_size_bands_disjoint():
    bands = SynthConfig().size_bands
    assert bands["small"][1] <= bands["medium"][0]
    assert bands["medium"][1] <= bands["large"][0]


def test_config_errors():
    with pytest.raises(ConfigError):
        generate_sample(0, SynthConfig(height=60))
    with pytest.raises(ConfigError):
        generate_sample(0, SynthConfig(size_bands={
            "small": (0.08, 0.05), "medium": (0.11, 0.17), "large": (0.19, 0.27)}))
    with pytest.raises(ConfigError):
        generate_sample(0, SynthConfig(size_bands={
            "small": (0.05, 0.12), "medium": (0.11, 0.17), "large": (0.19, 0.27)}))
    with pytest.raises(ConfigError):
        generate_sample(0, SynthConfig(lesion_count_range=(2, 1)))


# --- prompts ---------------------------------------------------------------

def test_prompt_grammar_structure():
    cfg = SynthConfig()
    for seed in range(50):
        _, _, prompt, record = generate_sample(seed, cfg)
        n = len(record.lesions)
        parts = prompt.split(", ")
        assert len(parts) == 1 + n
        words = {1: "one", 2: "two", 3: "three"}
        assert parts[0] == f"{words[n]} lesion" + ("s" if n > 1 else "")
        for clause, les in zip(parts[1:], record.lesions):
            bits = clause.split(" ")
            assert bits[0] == "one"
            assert bits[1] == les.size_class
            vert = "upper" if les.center_y < cfg.height / 2 else "lower"
            horiz = "left" if les.center_x < cfg.width / 2 else "right"
            assert bits[2:] == [vert, horiz]


def test_prompt_example_shape():
    # the documented grammar: "two lesions, one small upper left, one large lower right"
    from tamiseg.synth_data import LesionSpec
    lesions = (
        LesionSpec("small", 10.0, 10.0, 3.0, 3.0, 0.0, ()),
        LesionSpec("large", 50.0, 50.0, 12.0, 12.0, 0.0, ()),
    )
    assert make_prompt(lesions, 64, 64) == \
        "two lesions, one small upper left, one large lower right"


# --- perturbation ----------------------------------------------------------

def test_perturb_identity_parameters_exact():
    img, _, _, _ = generate_sample(11, SynthConfig())
    out = perturb(img, 123, IDENTITY_PERTURB)
    assert out is not img
    assert np.array_equal(out, img)
    assert out.dtype == img.dtype


def test_perturb_grayscale_channels_equal():
    img, _, _, _ = generate_sample(12, SynthConfig())
    cfg = PerturbConfig(brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0,
                        grayscale_prob=1.0, blur_sigma=(0.0, 0.0))
    out = perturb(img, 5, cfg)
    assert np.allclose(out[..., 0], out[..., 1], atol=1e-7)
    assert np.allclose(out[..., 1], out[..., 2], atol=1e-7)


def test_perturb_blur_of_constant_is_constant():
    img = np.full((64, 64, 3), 0.6, dtype=np.float32)
    cfg = PerturbConfig(brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0,
                        grayscale_prob=0.0, blur_sigma=(1.5, 1.5))
    out = perturb(img, 5, cfg)
    assert np.allclose(out, 0.6, atol=1e-6)


def test_perturb_deterministic_and_bounded():
    img, _, _, _ = generate_sample(13, SynthConfig())
    cfg = PerturbConfig()
    a = perturb(img, 42, cfg)
    b = perturb(img, 42, cfg)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
    c = perturb(img, 43, cfg)
    assert not np.array_equal(a, c)


def test_perturb_rejects_bad_config():
    img = np.zeros((32, 32, 3), dtype=np.float32)
    with pytest.raises(ConfigError):
        perturb(img, 0, PerturbConfig(brightness=-0.1))
    with pytest.raises(ConfigError):
        perturb(img, 0, PerturbConfig(blur_sigma=(2.0, 1.0)))


def test_hsv_conversion_matches_colorsys():
    rng = np.random.default_rng(0)
    rgb = rng.uniform(0.0, 1.0, size=(40, 3))
    hsv = _rgb_to_hsv(rgb)
    back = _hsv_to_rgb(hsv)
    for i in range(rgb.shape[0]):
        expect = colorsys.rgb_to_hsv(*rgb[i])
        assert np.allclose(hsv[i], expect, atol=1e-12), (hsv[i], expect)
    assert np.allclose(back, rgb, atol=1e-12)


# --- disk round trip ---------------------------------------------------------

def test_write_load_round_trip(tmp_path):
    cfg = SynthConfig()
    samples = generate_dataset(10, 900, cfg)
    write_dataset(samples, tmp_path)
    loaded = load_dataset(tmp_path)
    assert len(loaded) == 10
    for orig, got in zip(samples, loaded):
        assert got.sample_id == orig.sample_id
        assert np.array_equal(got.image, orig.image), "image PNG round trip must be lossless"
        assert np.array_equal(got.mask, orig.mask)
        assert got.prompt == orig.prompt
        assert got.record.seed == orig.record.seed
        assert got.record.lesions == orig.record.lesions


def test_missing_mask_is_integrity_error(tmp_path):
    samples = generate_dataset(3, 20, SynthConfig())
    write_dataset(samples, tmp_path)
    victim = tmp_path / "masks" / "00001.png"
    victim.unlink()
    with pytest.raises(DatasetError, match="00001"):
        load_dataset(tmp_path)


def test_nonbinary_mask_rejected(tmp_path):
    from PIL import Image as PILImage
    samples = generate_dataset(1, 21, SynthConfig())
    write_dataset(samples, tmp_path)
    bad = np.full((64, 64), 100, dtype=np.uint8)
    PILImage.fromarray(bad, mode="L").save(tmp_path / "masks" / "00000.png")
    with pytest.raises(DatasetError, match="non-binary"):
        load_dataset(tmp_path)


def test_empty_dataset_round_trip(tmp_path):
    write_dataset([], tmp_path)
    assert (tmp_path / "manifest.csv").exists()
    assert load_dataset(tmp_path) == []


def test_load_without_manifest_fails(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        load_dataset(tmp_path)


def test_records_are_optional_on_load(tmp_path):
    samples = generate_dataset(2, 30, SynthConfig())
    write_dataset(samples, tmp_path)
    for f in (tmp_path / "records").iterdir():
        f.unlink()
    loaded = load_dataset(tmp_path)
    assert all(s.record is None for s in loaded)
    assert np.array_equal(loaded[0].image, samples[0].image)
