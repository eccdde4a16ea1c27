import numpy as np
import pytest

from tstdepth.data import (
    AugmentConfig,
    DepthSample,
    augment,
    batches,
    list_samples,
    load_dataset,
    parse_synth_spec,
    read_depth_pgm,
    read_raw_f32,
    read_sample,
    scene_layers,
    synth_dataset,
    synth_scene,
    write_depth_pgm,
    write_raw_f32,
    write_sample,
)
from tstdepth.errors import ConfigError, FormatError, UsageError


def test_synth_deterministic():
    a, b = synth_scene(7), synth_scene(7)
    for x, y in [(a.rgb, b.rgb), (a.depth, b.depth), (a.mask, b.mask)]:
        assert x.tobytes() == y.tobytes()
    assert synth_scene(8).depth.tobytes() != a.depth.tobytes()


@pytest.mark.parametrize("seed", range(10))
def test_synth_ranges_and_types(seed):
    s = synth_scene(seed, 64, 96, max_depth=10.0)
    assert s.rgb.shape == (3, 64, 96) and s.rgb.dtype == np.float32
    assert s.depth.shape == (1, 64, 96) and s.mask.all()
    assert (s.depth > 0).all() and (s.depth <= 10.0).all()
    assert (s.rgb >= 0).all() and (s.rgb <= 1).all()
    assert 3 <= s.meta["objects"] <= 8


def test_synth_min_composite_oracle():
    h = w = 64
    layers = scene_layers(0, h, w, 10.0)
    kinds = {layer.kind for layer in layers[1:]}
    assert kinds <= {"rect", "ellipse"}
    ref = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            ref[i, j] = min(layer.depth[i, j] for layer in layers if layer.region[i, j])
    ref = np.clip(ref, 0.5, 10.0)
    np.testing.assert_allclose(synth_scene(0, h, w, 10.0).depth[0], ref.astype(np.float32))
    # wherever two objects overlap the nearer one is what we see
    overlaps = 0
    for a in layers[1:]:
        for b in layers[1:]:
            if a is b:
                continue
            both = a.region & b.region
            overlaps += both.sum()
    assert overlaps > 0


def test_synth_too_small():
    with pytest.raises(ConfigError):
        synth_scene(0, 16, 64)


def test_synth_dataset_seeds_disjoint():
    a, b = synth_dataset(3, seed=0), synth_dataset(3, seed=1)
    assert len({s.meta["seed"] for s in a + b}) == 6


# -- augmentation -----------------------------------------------------------------
def test_augment_identity_when_disabled(rng):
    s = synth_scene(1)
    out = augment(s, rng, AugmentConfig.disabled())
    for x, y in [(out.rgb, s.rgb), (out.depth, s.depth), (out.mask, s.mask)]:
        np.testing.assert_array_equal(x, y)
    assert out.rgb.dtype == s.rgb.dtype


def test_flip_is_involution():
    s = synth_scene(2)
    cfg = AugmentConfig(p_hflip=1.0, p_color=0.0, p_cutdepth=0.0)
    once = augment(s, np.random.default_rng(0), cfg)
    np.testing.assert_array_equal(once.depth, s.depth[:, :, ::-1])
    np.testing.assert_array_equal(once.rgb, s.rgb[:, :, ::-1])
    twice = augment(once, np.random.default_rng(1), cfg)
    for x, y in [(twice.rgb, s.rgb), (twice.depth, s.depth), (twice.mask, s.mask)]:
        np.testing.assert_array_equal(x, y)


def test_cutdepth_region():
    s = synth_scene(3)
    cfg = AugmentConfig(p_hflip=0.0, p_color=0.0, p_cutdepth=1.0)
    out = augment(s, np.random.default_rng(5), cfg)
    x0, x1 = out.meta["cutdepth"]
    assert 0.25 * 64 - 1 <= x1 - x0 <= 0.75 * 64 + 1
    outside = np.ones(64, bool)
    outside[x0:x1] = False
    np.testing.assert_array_equal(out.rgb[:, :, outside], s.rgb[:, :, outside])
    norm = s.depth[0, :, x0:x1] / 10.0
    for c in range(3):
        np.testing.assert_allclose(out.rgb[c, :, x0:x1], norm)
    np.testing.assert_array_equal(out.depth, s.depth)
    np.testing.assert_array_equal(out.mask, s.mask)


def test_color_jitter_touches_rgb_only():
    s = synth_scene(4)
    out = augment(s, np.random.default_rng(0), AugmentConfig(p_hflip=0.0, p_color=1.0, p_cutdepth=0.0))
    assert "color" in out.meta and not np.array_equal(out.rgb, s.rgb)
    assert (out.rgb >= 0).all() and (out.rgb <= 1).all() and np.isfinite(out.rgb).all()
    np.testing.assert_array_equal(out.depth, s.depth)


def test_crop_shares_geometry():
    s = synth_scene(5, 64, 96)
    out = augment(s, np.random.default_rng(0), AugmentConfig(p_hflip=1.0, p_color=0.0, p_cutdepth=0.0, crop=(32, 64)))
    assert out.hw == (32, 64)
    # find the crop offset from depth, then check rgb used the same window
    flipped = out.depth[0, :, ::-1]
    hits = [
        (t, l)
        for t in range(33)
        for l in range(33)
        if np.array_equal(s.depth[0, t : t + 32, l : l + 64], flipped)
    ]
    assert hits
    t, l = hits[0]
    np.testing.assert_array_equal(out.rgb[:, :, ::-1], s.rgb[:, t : t + 32, l : l + 64])
    with pytest.raises(UsageError):
        augment(s, np.random.default_rng(0), AugmentConfig(crop=(128, 64)))


def test_augment_rates():
    s = synth_scene(6, 32, 32)
    rng = np.random.default_rng(123)
    cfg = AugmentConfig()
    counts = dict(hflip=0, color=0, cutdepth=0)
    n = 10_000
    for _ in range(n):
        meta = augment(s, rng, cfg).meta
        for k in counts:
            counts[k] += k in meta
    assert abs(counts["hflip"] / n - 0.5) < 0.03
    assert abs(counts["color"] / n - 0.5) < 0.03
    assert abs(counts["cutdepth"] / n - 0.25) < 0.03


def test_augment_config_validation():
    with pytest.raises(ConfigError):
        AugmentConfig(p_hflip=1.5)
    with pytest.raises(ConfigError):
        AugmentConfig(p_cutdepth=-0.1)


def test_sample_shape_validation():
    with pytest.raises(ConfigError):
        DepthSample(np.zeros((3, 4, 4)), np.zeros((1, 4, 5)), np.ones((1, 4, 4), bool))


# -- file formats -----------------------------------------------------------------
def test_raw_f32_round_trip(tmp_path, rng):
    for shape in [(3, 5, 7), (2,), (1, 3, 4, 4)]:
        arr = rng.standard_normal(shape).astype(np.float32)
        write_raw_f32(tmp_path / "a.f32", arr)
        back = read_raw_f32(tmp_path / "a.f32")
        assert back.shape == shape and back.tobytes() == arr.tobytes()


def test_raw_f32_layout(tmp_path):
    write_raw_f32(tmp_path / "a.f32", np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    blob = (tmp_path / "a.f32").read_bytes()
    assert blob[:4] == b"TSTF"
    assert blob[4:16] == bytes([2, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0])
    assert np.frombuffer(blob[16:], "<f4").tolist() == [1.0, 2.0, 3.0]


def test_raw_f32_errors(tmp_path):
    p = tmp_path / "a.f32"
    write_raw_f32(p, np.zeros((2, 3), np.float32))
    blob = p.read_bytes()
    p.write_bytes(blob[:-4])
    with pytest.raises(FormatError, match="expected 40 bytes total, got 36"):
        read_raw_f32(p)
    p.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="byte 0"):
        read_raw_f32(p)
    p.write_bytes(blob[:5])
    with pytest.raises(FormatError, match="truncated"):
        read_raw_f32(p)


def test_pgm_scaling_and_round_trip(tmp_path, rng):
    p = tmp_path / "d.pgm"
    write_depth_pgm(p, np.ones((1, 4, 5)))
    blob = p.read_bytes()
    assert blob.startswith(b"P5\n5 4\n65535\n")
    assert (np.frombuffer(blob[-40:], ">u2") == 1000).all()
    mm = rng.integers(0, 65536, (6, 7))
    write_depth_pgm(p, mm / 1000.0)
    np.testing.assert_array_equal(np.rint(read_depth_pgm(p) * 1000.0), mm)


def test_pgm_errors(tmp_path):
    p = tmp_path / "d.pgm"
    write_depth_pgm(p, np.ones((4, 4)))
    blob = p.read_bytes()
    p.write_bytes(blob[:-3])
    with pytest.raises(FormatError, match="expected"):
        read_depth_pgm(p)
    p.write_bytes(b"P2" + blob[2:])
    with pytest.raises(FormatError, match="magic"):
        read_depth_pgm(p)


def test_sample_round_trip_and_listing(tmp_path):
    samples = synth_dataset(2, seed=3)
    for i, s in enumerate(samples):
        write_sample(tmp_path / f"s{i}", s)
    stems = list_samples(tmp_path)
    assert [st.rsplit("/", 1)[-1] for st in stems] == ["s0", "s1"]
    back = read_sample(stems[0] + ".rgb.f32")
    assert back.rgb.tobytes() == samples[0].rgb.tobytes()
    # depth passes through millimetres
    np.testing.assert_allclose(back.depth, samples[0].depth, atol=5e-4)
    assert len(load_dataset(str(tmp_path))) == 2
    with pytest.raises(FormatError):
        list_samples(tmp_path / "missing")


def test_synth_spec_parsing():
    assert parse_synth_spec("synth:count=4,seed=2,size=32x64,max_depth=80") == dict(
        count=4, seed=2, height=32, width=64, max_depth=80.0
    )
    assert len(load_dataset("synth:count=3,size=32x32")) == 3
    with pytest.raises(ConfigError):
        parse_synth_spec("synth:colour=red")


def test_batches_follow_order():
    samples = synth_dataset(5, seed=0, height=32, width=32)
    got = list(batches(samples, 2, [4, 0, 3, 1, 2]))
    assert [b[0].shape[0] for b in got] == [2, 2, 1]
    np.testing.assert_array_equal(got[0][1][0], samples[4].depth)
    np.testing.assert_array_equal(got[2][0][0], samples[2].rgb)
