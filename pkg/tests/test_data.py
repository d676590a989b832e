"""Bouncing-ball generator tests with an independent closed-form reflection
oracle, plus bit-exact dataset file round trips."""

import numpy as np
import pytest

from framediff.data import (
    OCTANT,
    QUADRANT,
    BounceParams,
    LatentVideo,
    gen_bounce,
    gen_dataset,
    read_dataset,
    simulate_trajectory,
    velocity_label,
    write_dataset,
)
from framediff.errors import DomainError, FormatError, GeometryError


def folded_position(x0: float, v: float, k: int, lo: float, hi: float) -> float:
    """Closed-form elastic reflection: fold x0 + k*v into [lo, hi] with a
    triangle wave of period 2*(hi-lo). Independent of the iterative code."""
    width = hi - lo
    z = (x0 - lo + k * v) % (2 * width)
    return lo + (width - abs(width - z))


class TestParams:
    def test_invalid_params_rejected(self):
        with pytest.raises(DomainError):
            BounceParams(radius=9.0, height=16, width=16)
        with pytest.raises(DomainError):
            BounceParams(frames=1)
        with pytest.raises(DomainError):
            BounceParams(speed_min=0.0)
        with pytest.raises(DomainError):
            BounceParams(label_rule="diagonal")

    def test_num_classes(self):
        assert BounceParams(label_rule=QUADRANT).num_classes == 4
        assert BounceParams(label_rule=OCTANT).num_classes == 8


class TestLabels:
    def test_quadrant_ordering(self):
        assert velocity_label(+1.0, +1.0, QUADRANT) == 0
        assert velocity_label(+1.0, -1.0, QUADRANT) == 1
        assert velocity_label(-1.0, +1.0, QUADRANT) == 2
        assert velocity_label(-1.0, -1.0, QUADRANT) == 3

    def test_octant_sectors(self):
        assert velocity_label(1.0, 0.1, OCTANT) == 0
        assert velocity_label(0.1, 1.0, OCTANT) == 1
        assert velocity_label(-1.0, -0.1, OCTANT) == 4

    def test_class_balance_over_1000_seeds(self):
        params = BounceParams()
        labels = [gen_bounce(params, s).label for s in range(1000)]
        counts = np.bincount(labels, minlength=4)
        # uniform direction => each quadrant within +/-20% of 250
        assert np.all(counts >= 200)
        assert np.all(counts <= 300)


class TestKinematics:
    def test_matches_closed_form_oracle_100_seeds(self):
        params = BounceParams(frames=12)
        r = params.radius
        for seed in range(100):
            positions, v0 = simulate_trajectory(params, seed)
            x0, y0 = positions[0]
            for k in range(params.frames):
                ex = folded_position(x0, v0[0], k, r, params.width - r)
                ey = folded_position(y0, v0[1], k, r, params.height - r)
                assert abs(positions[k, 0] - ex) <= 1e-9, (seed, k)
                assert abs(positions[k, 1] - ey) <= 1e-9, (seed, k)

    def test_displacement_magnitude_constant_between_reflections(self):
        params = BounceParams(frames=16, speed_min=0.8, speed_max=0.8)
        positions, v0 = simulate_trajectory(params, 7)
        speed = np.hypot(*v0)
        steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
        # every step is at most the speed, exactly the speed away from walls
        assert np.all(steps <= speed + 1e-12)
        assert np.any(np.abs(steps - speed) <= 1e-12)


class TestGenBounce:
    def test_values_bounded_and_finite(self):
        video = gen_bounce(BounceParams(), 3)
        assert np.all(np.isfinite(video.frames))
        assert video.frames.min() >= -1.0
        assert video.frames.max() <= 1.0
        assert video.frames.max() == pytest.approx(1.0)  # peak reaches +1
        assert video.frames.min() == -1.0  # background

    def test_regeneration_bit_identical(self):
        a = gen_bounce(BounceParams(), 11)
        b = gen_bounce(BounceParams(), 11)
        assert np.array_equal(a.frames, b.frames)
        assert a.label == b.label

    def test_dataset_regeneration_deterministic(self):
        params = BounceParams()
        a = gen_dataset(params, seed=5, count=8)
        b = gen_dataset(params, seed=5, count=8)
        for va, vb in zip(a, b):
            assert np.array_equal(va.frames, vb.frames)
        c = gen_dataset(params, seed=6, count=8)
        assert not np.array_equal(a[0].frames, c[0].frames)


class TestDatasetFile:
    def test_round_trip_bit_exact(self, tmp_path):
        videos = gen_dataset(BounceParams(), seed=1, count=3)
        path = tmp_path / "data.gpdv"
        write_dataset(videos, path)
        back = read_dataset(path)
        assert len(back) == 3
        for a, b in zip(videos, back):
            assert np.array_equal(a.frames, b.frames)
            assert a.label == b.label

    def test_empty_list_round_trip(self, tmp_path):
        path = tmp_path / "empty.gpdv"
        write_dataset([], path)
        assert read_dataset(path) == []

    def test_mangled_magic_names_offset(self, tmp_path):
        path = tmp_path / "data.gpdv"
        write_dataset(gen_dataset(BounceParams(), 1, 1), path)
        raw = bytearray(path.read_bytes())
        raw[0] = ord("X")
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="offset 0"):
            read_dataset(path)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "data.gpdv"
        write_dataset(gen_dataset(BounceParams(), 1, 2), path)
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        with pytest.raises(FormatError, match="truncated"):
            read_dataset(path)

    def test_mixed_geometry_rejected(self, tmp_path):
        a = gen_bounce(BounceParams(), 1)
        b = gen_bounce(BounceParams(height=8, width=8, radius=2.0), 1)
        with pytest.raises(GeometryError):
            write_dataset([a, b], tmp_path / "bad.gpdv")

    def test_video_shape_validated(self):
        with pytest.raises(GeometryError):
            LatentVideo(np.zeros((4, 16, 16)), 0)
