import math

import numpy as np
import pytest

from radtwin.emrt import DirectionGrid
from radtwin.oracle import (
    SPEED_OF_LIGHT,
    DegenerateGeometry,
    OracleConfig,
    PathComponent,
    path_loss_db,
    power_from_db,
    render_spectrum,
    scene_path_loss,
    trace_paths,
    wall_sequences,
)
from radtwin.scene import BoxObstacle, Scene, SceneConfig, generate_scene

EMPTY = Scene("empty", (6.0, 4.0, 2.5), (), (0.5, 0.5, 2.0), 0)
LAM = SPEED_OF_LIGHT / 3.5e9


def test_los_friis_amplitude(rng):
    for _ in range(20):
        rx = rng.uniform((0.1, 0.1, 0.1), (5.9, 3.9, 2.4))
        (p,) = trace_paths(EMPTY, rx, max_order=0)
        d = np.linalg.norm(rx - np.array(EMPTY.tx_position))
        assert p.delta_A == pytest.approx(LAM / (4 * math.pi * d), rel=1e-12)
        assert p.bounce_count == 0
        np.testing.assert_allclose(p.arrival_dir, (np.array(EMPTY.tx_position) - rx) / d, atol=1e-12)


def test_free_space_power_law(rng):
    for _ in range(20):
        rx = rng.uniform((0.1, 0.1, 0.1), (5.9, 3.9, 2.4))
        spec = render_spectrum(trace_paths(EMPTY, rx, 0), DirectionGrid(), beamwidth=20.0)  # wide enough to always light a bin
        d = np.linalg.norm(rx - np.array(EMPTY.tx_position))
        lit = spec.values[spec.values > 0]
        assert len(lit) >= 1
        np.testing.assert_allclose(lit, (LAM / (4 * math.pi * d)) ** 2, rtol=1e-12)


def test_blocked_los():
    wall = BoxObstacle((2.0, 0.0, 0.0), (2.5, 4.0, 2.5), "shelf")
    sc = Scene("blocked", (6.0, 4.0, 2.5), (wall,), (0.5, 0.5, 2.0), 0)
    assert trace_paths(sc, (4.0, 2.0, 1.0), 0) == []


def test_empty_shoebox_first_order_count():
    paths = trace_paths(EMPTY, (3.1, 2.2, 1.3), 1)
    assert len(paths) == 7
    assert sorted(p.bounce_count for p in paths) == [0, 1, 1, 1, 1, 1, 1]


def test_empty_shoebox_second_order_count():
    # unfolding a box: both orders of a parallel pair are valid (6 ordered pairs),
    # but only one order of each perpendicular pair is (12 unordered pairs)
    paths = trace_paths(EMPTY, (3.1, 2.2, 1.3), 2)
    assert len(list(wall_sequences(2))) == 1 + 6 + 30
    assert len(paths) == 1 + 6 + 6 + 12
    second = {p.walls for p in paths if p.bounce_count == 2}
    for a in range(6):
        for b in range(6):
            if a // 2 != b // 2:
                assert ((a, b) in second) != ((b, a) in second)


def test_single_bounce_geometry():
    # independent check: mirror law at the floor, reflection point found by similar triangles
    rx = np.array([3.0, 2.0, 1.0])
    tx = np.array(EMPTY.tx_position)
    (p,) = [q for q in trace_paths(EMPTY, rx, 1) if q.walls == (4,)]
    frac = rx[2] / (rx[2] + tx[2])
    hit = rx + frac * (np.array([tx[0], tx[1], 0.0]) - np.array([rx[0], rx[1], 0.0]))
    hit[2] = 0.0
    length = np.linalg.norm(hit - rx) + np.linalg.norm(tx - hit)
    assert p.path_length == pytest.approx(length, rel=1e-12)
    assert p.delta_A == pytest.approx(LAM / (4 * math.pi * length) * 0.6, rel=1e-12)
    assert p.delta_psi == pytest.approx((2 * math.pi * length / LAM) % (2 * math.pi), abs=1e-9)
    np.testing.assert_allclose(p.arrival_dir, (hit - rx) / np.linalg.norm(hit - rx), atol=1e-12)


def test_rx_equals_tx():
    with pytest.raises(DegenerateGeometry):
        trace_paths(EMPTY, EMPTY.tx_position, 1)


def _pair(psi2, a=1e-3):
    d = np.array([0.0, 0.0, 1.0])
    return [PathComponent(a, 0.0, d, 1.0, 0), PathComponent(a, psi2, d, 2.0, 1)]


def test_single_path_exact_direction():
    spec = render_spectrum(_pair(0.0)[:1], DirectionGrid(), tx_amplitude=2.0)
    assert spec.values[0, 0] == pytest.approx((2.0 * 1e-3) ** 2, rel=1e-15)


def test_destructive_interference():
    spec = render_spectrum(_pair(math.pi), DirectionGrid())
    assert spec.values[0, 0] == pytest.approx(0.0, abs=1e-30)


def test_constructive_interference():
    spec = render_spectrum(_pair(0.0), DirectionGrid(), tx_amplitude=3.0)
    assert spec.values[0, 0] == pytest.approx(4 * 1e-6 * 9.0, rel=1e-12)


def test_hard_cone_edges():
    # a path 4.9 degrees from zenith lands in the phi=0 row only
    ang = math.radians(4.9)
    d = np.array([math.sin(ang), 0.0, math.cos(ang)])
    spec = render_spectrum([PathComponent(1.0, 0.0, d, 1.0, 0)], DirectionGrid(), beamwidth=10.0)
    assert np.all(spec.values[0] == 1.0)
    assert spec.values[1:].sum() == 0.0
    with pytest.raises(ValueError):
        render_spectrum([], DirectionGrid(), beamwidth=0.0)


@pytest.mark.parametrize("psi,db", [(1.0, 0.0), (0.01, 20.0), (0.0, 250.0)])
def test_path_loss_values(psi, db):
    assert path_loss_db(np.array([psi]))[0] == pytest.approx(db, abs=1e-12)


def test_round_trip(rng):
    psi = 10.0 ** rng.uniform(-20, 0, size=1000)
    np.testing.assert_allclose(power_from_db(path_loss_db(psi)), psi, rtol=1e-9)


def test_worker_count_does_not_change_result(rng):
    sc = generate_scene(SceneConfig(), 3)
    rx = [r for r in rng.uniform((0, 0, 0), sc.room_dims, size=(12, 3)) if not sc.inside_obstacle(r)]
    a = scene_path_loss(sc, rx, OracleConfig(), workers=1)
    b = scene_path_loss(sc, rx, OracleConfig(), workers=3)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (len(rx), 19, 36)
