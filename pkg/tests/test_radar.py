import numpy as np
import pytest

from milliflow.errors import ConfigError
from milliflow.radar import (
    SPEED_OF_LIGHT,
    CfarParams,
    RadarConfig,
    Reflectors,
    azimuth_cosine_axis,
    cfar_detect,
    clutter_removal,
    default_vayyar_config,
    elevation_cosine_axis,
    heatmap,
    range_axis,
    sample_reflectors,
    synthesize_cube,
    to_point_cloud,
    visibility_filter,
)
from milliflow.skeleton import ActivitySpec, generate_motion, make_subject


def quiet_cfg(**kw) -> RadarConfig:
    return RadarConfig(snr_db=None, ghost_prob=0.0, micro_motion_std=0.0, **kw)


def single_reflector(position, reflectivity=1.0, normal=(0.0, -1.0, 0.0)):
    return Reflectors(
        np.array([position], dtype=float),
        np.array([reflectivity]),
        np.array([normal], dtype=float),
        np.array([0], dtype=np.int64),
    )


def reflectors_at(positions):
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    return Reflectors(
        positions,
        np.ones(n),
        np.tile([0.0, -1.0, 0.0], (n, 1)),
        np.zeros(n, dtype=np.int64),
    )


def dft_oracle(signal, k):
    # plain summation definition of the DFT with positive exponent
    m = np.arange(len(signal))
    return np.sum(np.conj(signal) * np.exp(-2j * np.pi * k * m / len(signal)))


class TestConfig:
    def test_derived_quantities(self):
        cfg = default_vayyar_config()
        assert cfg.bandwidth == pytest.approx(1.6e9)
        assert cfg.range_resolution == pytest.approx(0.09375, abs=1e-12)
        assert cfg.freq_step == pytest.approx(10.666e6, rel=1e-3)
        assert cfg.max_range == pytest.approx(14.0, abs=0.1)
        assert cfg.n_virtual_pairs == 320
        assert cfg.n_freq_steps == 151
        # half-wavelength spacing at the center frequency
        assert cfg.element_spacing == pytest.approx(
            SPEED_OF_LIGHT / 62.8e9 / 2.0, rel=1e-12
        )

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            RadarConfig(f_min=63e9, f_max=62e9)
        with pytest.raises(ConfigError):
            RadarConfig(n_freq_steps=1)


class TestSynthesizeCube:
    def test_range_fft_peak_bin_21(self):
        # 2.00 m / 0.09375 m = 21.33 -> peak at bin 21 of the unpadded
        # 151-point spectrum, checked against an explicit-sum DFT oracle on
        # several antennas.
        cfg = quiet_cfg()
        cube = synthesize_cube(single_reflector((0.0, 2.0, 0.0)), cfg)
        assert cube.shape == (20, 16, 151)
        for a, e in [(0, 0), (7, 3), (19, 15)]:
            mags = [abs(dft_oracle(cube[a, e], k)) for k in range(151)]
            assert int(np.argmax(mags)) == 21

    def test_zero_reflectors_zero_cube(self):
        cfg = quiet_cfg()
        cube = synthesize_cube(reflectors_at(np.empty((0, 3))), cfg)
        assert np.all(cube == 0)

    def test_two_reflectors_resolved_iff_separated(self):
        cfg = quiet_cfg()
        for dr, expected_peaks in [(0.20, 2), (0.05, 1)]:
            refl = reflectors_at([(0.0, 2.0, 0.0), (0.0, 2.0 + dr, 0.0)])
            cube = synthesize_cube(refl, cfg)
            sig = cube[0, 0]
            mags = np.array([abs(dft_oracle(sig, k)) for k in range(151)])
            # count prominent local maxima near the target bins
            floor = 0.25 * mags.max()
            peaks = [
                k
                for k in range(1, 150)
                if mags[k] > floor and mags[k] >= mags[k - 1] and mags[k] >= mags[k + 1]
            ]
            assert len(peaks) == expected_peaks

    def test_permutation_invariance(self):
        cfg = quiet_cfg()
        rng = np.random.default_rng(0)
        pos = rng.uniform([-1, 2, -1], [1, 4, 1], size=(30, 3))
        refl = reflectors_at(pos)
        perm = rng.permutation(30)
        refl_p = Reflectors(
            refl.positions[perm],
            refl.reflectivities[perm],
            refl.normals[perm],
            refl.bone_index[perm],
        )
        a = synthesize_cube(refl, cfg)
        b = synthesize_cube(refl_p, cfg)
        assert np.max(np.abs(a - b)) < 1e-9

    def test_noise_determinism_and_level(self):
        cfg = RadarConfig(snr_db=20.0)
        refl = single_reflector((0.0, 3.0, 0.0))
        a = synthesize_cube(refl, cfg, seed=5)
        b = synthesize_cube(refl, cfg, seed=5)
        assert np.array_equal(a, b)
        clean = synthesize_cube(refl, quiet_cfg(), seed=5)
        noise = a - clean
        snr = np.mean(np.abs(clean) ** 2) / np.mean(np.abs(noise) ** 2)
        assert 10 * np.log10(snr) == pytest.approx(20.0, abs=1.0)


class TestClutterRemoval:
    def test_static_cancels(self):
        cfg = quiet_cfg()
        cube = synthesize_cube(single_reflector((0.5, 2.5, 0.2)), cfg)
        residual = clutter_removal([cube.copy() for _ in range(4)])
        assert np.max(np.abs(residual)) < 1e-12

    def test_moving_leaves_residual(self):
        cfg = quiet_cfg()
        cubes = [
            synthesize_cube(single_reflector((0.0, 2.0 + 0.05 * i, 0.0)), cfg)
            for i in range(4)
        ]
        residual = clutter_removal(cubes)
        assert np.max(np.abs(residual)) > 1.0

    def test_zero_window(self):
        z = np.zeros((20, 16, 151), dtype=complex)
        assert np.all(clutter_removal([z, z, z]) == 0)

    def test_window_too_short(self):
        with pytest.raises(ConfigError):
            clutter_removal([np.zeros((2, 2, 4), dtype=complex)])


class TestHeatmap:
    def test_single_reflector_peak_location(self):
        cfg = quiet_cfg()
        cube = synthesize_cube(single_reflector((0.0, 2.0, 0.0)), cfg)
        hm = heatmap(cube, cfg)
        assert hm.shape == (302, 40, 32)
        r, a, e = np.unravel_index(np.argmax(hm), hm.shape)
        assert range_axis(cfg)[r] == pytest.approx(2.0, abs=cfg.range_resolution)
        assert abs(azimuth_cosine_axis(cfg)[a]) <= 0.051
        assert abs(elevation_cosine_axis(cfg)[e]) <= 0.0626

    def test_range_linearity_grid(self):
        cfg = quiet_cfg()
        pad = cfg.pad_factor
        for r_true in np.linspace(0.5, 5.0, 10):
            cube = synthesize_cube(single_reflector((0.0, r_true, 0.0)), cfg)
            profile = heatmap(cube, cfg)[:, 20, 16]
            peak = int(np.argmax(profile))
            expected = round(r_true / cfg.range_resolution * pad)
            assert abs(peak - expected) <= 1

    def test_azimuth_angle_mapping(self):
        cfg = quiet_cfg()
        for az_deg in (-25.0, 10.0, 30.0):
            u = np.sin(np.deg2rad(az_deg))
            pos = (2.5 * u, 2.5 * np.sqrt(1 - u * u), 0.0)
            hm = heatmap(synthesize_cube(single_reflector(pos), cfg), cfg)
            _, a, _ = np.unravel_index(np.argmax(hm), hm.shape)
            u_axis = azimuth_cosine_axis(cfg)
            assert abs(u_axis[a] - u) <= (u_axis[1] - u_axis[0]) + 1e-9

    def test_elevation_angle_mapping(self):
        cfg = quiet_cfg()
        v = np.sin(np.deg2rad(15.0))
        pos = (0.0, 2.5 * np.sqrt(1 - v * v), 2.5 * v)
        hm = heatmap(synthesize_cube(single_reflector(pos), cfg), cfg)
        _, _, e = np.unravel_index(np.argmax(hm), hm.shape)
        v_axis = elevation_cosine_axis(cfg)
        assert abs(v_axis[e] - v) <= (v_axis[1] - v_axis[0]) + 1e-9

    def test_zero_cube(self):
        cfg = quiet_cfg()
        assert np.all(heatmap(np.zeros((20, 16, 151), complex), cfg) == 0)

    def test_real_cube_magnitude_symmetry(self):
        cfg = quiet_cfg()
        rng = np.random.default_rng(3)
        cube = rng.normal(size=(20, 16, 151)) + 0j
        hm = heatmap(cube, cfg)
        un = np.fft.ifftshift(hm, axes=(1, 2))  # undo the angle-axis shift
        mirrored = un.copy()
        for ax in range(3):
            mirrored = np.flip(np.roll(mirrored, -1, axis=ax), axis=ax)
        np.testing.assert_allclose(un, mirrored, atol=1e-9)


class TestCfarDetect:
    def test_two_injected_peaks(self):
        hm = np.ones((64, 8, 8)) * 0.01
        hm[10, 3, 4] = 5.0
        hm[40, 5, 2] = 4.0
        det = cfar_detect(hm, CfarParams(train_cells=6, guard_cells=2, scale_factor=3.0))
        assert det.shape == (2, 4)
        assert det[0][:3].tolist() == [10, 3, 4]
        assert det[1][:3].tolist() == [40, 5, 2]
        assert det[0][3] == pytest.approx(5.0)

    def test_uniform_no_detection(self):
        hm = np.ones((32, 4, 4))
        assert len(cfar_detect(hm, CfarParams(8, 2, 1.5))) == 0

    def test_resolution_law_full_chain(self):
        cfg = quiet_cfg()
        res = cfg.range_resolution
        for sep, expected in [(2 * res, 2), (0.5 * res, 1)]:
            refl = reflectors_at([(0.0, 2.0, 0.0), (0.0, 2.0 + sep, 0.0)])
            hm = heatmap(synthesize_cube(refl, cfg), cfg)
            det = cfar_detect(hm, cfg.cfar)
            # look only at the range column through boresight
            on_axis = det[(det[:, 1] == 20) & (det[:, 2] == 16)]
            assert len(on_axis) == expected

    def test_bad_params(self):
        hm = np.ones((8, 2, 2))
        with pytest.raises(ConfigError):
            cfar_detect(hm, CfarParams(train_cells=0))
        with pytest.raises(ConfigError):
            cfar_detect(hm, CfarParams(scale_factor=0.0))


class TestToPointCloud:
    def test_on_axis_conversion(self):
        cfg = quiet_cfg()
        det = np.array([[43.0, 20.0, 16.0, 2.5]])
        frame = to_point_cloud(det, cfg, ghost_prob=0.0, seed=0)
        assert len(frame) == 1
        x, y, z = frame.points[0]
        assert x == pytest.approx(0.0, abs=1e-12)
        assert z == pytest.approx(0.0, abs=1e-12)
        assert y == pytest.approx(range_axis(cfg)[43])
        assert frame.intensities[0] == pytest.approx(2.5)

    def test_ghost_prob_zero_and_one(self):
        cfg = quiet_cfg()
        det = np.array(
            [[43.0, 20.0, 16.0, 2.0], [50.0, 22.0, 14.0, 1.0], [60.0, 18.0, 17.0, 3.0]]
        )
        refl = reflectors_at([(0.0, 2.0, 0.0)])
        none = to_point_cloud(det, cfg, 0.0, seed=1, reflectors=refl)
        assert len(none) == 3
        doubled = to_point_cloud(det, cfg, 1.0, seed=1, reflectors=refl)
        assert len(doubled) == 6
        assert np.all(doubled.prov_bone[:3] >= 0)
        assert np.all(doubled.prov_bone[3:] == -1)
        for g in range(3):
            assert doubled.intensities[3 + g] < doubled.intensities[g]
            # ghosts sit farther along the same ray
            assert np.linalg.norm(doubled.points[3 + g]) > np.linalg.norm(
                doubled.points[g]
            )

    def test_unphysical_cells_dropped(self):
        cfg = quiet_cfg()
        det = np.array([[43.0, 0.0, 0.0, 1.0]])  # u=-1, v=-1: outside unit disk
        frame = to_point_cloud(det, cfg, 0.0, seed=0)
        assert len(frame) == 0

    def test_no_reflectors_means_no_provenance(self):
        cfg = quiet_cfg()
        det = np.array([[43.0, 20.0, 16.0, 1.0]])
        assert to_point_cloud(det, cfg, 0.0, seed=0).prov_bone is None


class TestReflectors:
    def test_count_and_radius(self):
        from milliflow._kernels import point_segment_distances

        model = make_subject(0)
        pose = generate_motion(model, ActivitySpec("ArmSwing"), 2)[0]
        cfg = quiet_cfg(reflectors_per_bone=10)
        refl = sample_reflectors(pose, model, cfg, seed=3)
        assert len(refl) == 130
        seg_a = np.array([pose.keypoints[p] for p, _ in model.bones])
        seg_b = np.array([pose.keypoints[c] for _, c in model.bones])
        d = point_segment_distances(refl.positions, seg_a, seg_b)
        for i in range(len(refl)):
            b = refl.bone_index[i]
            assert d[i, b] <= model.body_radius_per_bone[b] + 1e-9

    def test_determinism(self):
        model = make_subject(1)
        pose = generate_motion(model, ActivitySpec("Bowing"), 2)[1]
        cfg = quiet_cfg()
        a = sample_reflectors(pose, model, cfg, seed=7)
        b = sample_reflectors(pose, model, cfg, seed=7)
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.normals, b.normals)

    def test_visibility_filter(self):
        rng = np.random.default_rng(0)
        n = 50
        normals = rng.normal(size=(n, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        refl = Reflectors(
            np.tile([0.0, 3.0, 0.0], (n, 1)),
            np.ones(n),
            normals,
            np.zeros(n, dtype=np.int64),
        )
        origin = np.zeros(3)
        assert len(visibility_filter(refl, origin, np.pi)) == n
        assert len(visibility_filter(refl, origin, 0.0)) == 0
        toward = Reflectors(
            np.array([[0.0, 3.0, 0.0]]),
            np.ones(1),
            np.array([[0.0, -1.0, 0.0]]),
            np.zeros(1, dtype=np.int64),
        )
        assert len(visibility_filter(toward, origin, np.pi / 4)) == 1
