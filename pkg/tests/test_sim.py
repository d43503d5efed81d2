from __future__ import annotations

import numpy as np
import pytest

from tqd.rng import substream
from tqd.sim import (
    ScenarioConfig,
    format_scene,
    generate_scene,
    make_dataset,
    make_scene_data,
    parse_scene,
    read_scene_data,
    render_observations,
    scene_seed,
    write_scene_data,
)

LINEAR = ScenarioConfig(arena=1e6, accel_noise=0.0, birth_rate=0.0, death_prob=0.0, n_frames=20)


def test_linear_world_without_noise():
    scene = generate_scene(LINEAR, substream(0, "lin"))
    first = {b.instance_id: b for b in scene.frames[0]}
    for t, frame in enumerate(scene.frames):
        assert len(frame) == LINEAR.n_objects_init
        for b in frame:
            b0 = first[b.instance_id]
            expect = np.array(b0.center[:2]) + np.array(b0.velocity) * t * LINEAR.dt
            assert np.allclose(b.center[:2], expect, atol=1e-9)


def test_certain_death_empties_the_scene():
    cfg = ScenarioConfig(death_prob=1.0, birth_rate=0.0)
    scene = generate_scene(cfg, substream(0, "death"))
    assert len(scene.frames[0]) == cfg.n_objects_init
    assert all(len(f) == 0 for f in scene.frames[1:])


def test_object_count_near_equilibrium():
    cfg = ScenarioConfig()
    counts = [len(f) for s in range(100) for f in generate_scene(cfg, substream(s, "eq")).frames]
    target = cfg.birth_rate / cfg.death_prob
    assert abs(np.mean(counts) - target) < 0.1 * target


def test_ids_never_reused_and_boxes_inside_arena():
    cfg = ScenarioConfig(birth_rate=1.0, death_prob=0.1)
    scene = generate_scene(cfg, substream(1, "ids"))
    last_seen, first_seen = {}, {}
    for t, frame in enumerate(scene.frames):
        ids = [b.instance_id for b in frame]
        assert len(ids) == len(set(ids))
        for b in frame:
            first_seen.setdefault(b.instance_id, t)
            last_seen[b.instance_id] = t
            assert np.all(np.abs(b.center[:2]) <= cfg.arena)
    for iid, t0 in first_seen.items():
        present = [any(b.instance_id == iid for b in f) for f in scene.frames[t0:last_seen[iid] + 1]]
        assert all(present), f"instance {iid} reappeared after dying"


def test_clean_observations_are_exact():
    cfg = ScenarioConfig(miss_prob=0.0, clutter_rate=0.0, obs_pos_noise=0.0)
    scene = generate_scene(cfg, substream(0, "o"))
    obs = render_observations(scene.frames[3], cfg, substream(0, "r"))
    assert obs.source_ids == [b.instance_id for b in scene.frames[3]]
    assert np.array_equal(obs.raw[:, :3], np.array([b.center for b in scene.frames[3]]))


def test_all_missed_leaves_only_clutter():
    cfg = ScenarioConfig(miss_prob=1.0)
    scene = generate_scene(cfg, substream(0, "m"))
    rng = substream(0, "r")
    frames = [render_observations(f, cfg, rng) for f in scene.frames]
    assert all(s is None for o in frames for s in o.source_ids)
    assert sum(len(o) for o in frames) > 0


def test_empirical_miss_rate():
    cfg = ScenarioConfig(miss_prob=0.3, clutter_rate=0.0)
    frame = generate_scene(cfg, substream(0, "mr")).frames[0]
    rng = substream(1, "mr")
    seen = sum(len(render_observations(frame, cfg, rng)) for _ in range(10_000))
    assert abs(1 - seen / (10_000 * len(frame)) - 0.3) < 0.02


def test_determinism():
    a = make_scene_data(ScenarioConfig(), 3, 7)
    b = make_scene_data(ScenarioConfig(), 3, 7)
    assert format_scene(a.scene) == format_scene(b.scene)
    assert all(np.array_equal(x.raw, y.raw) for x, y in zip(a.observations, b.observations))


def test_train_and_eval_seeds_are_disjoint():
    train = {scene_seed("train", i) for i in range(10_000)}
    for s in range(3):
        assert not train & {scene_seed("eval", i, s) for i in range(10_000)}
    with pytest.raises(ValueError):
        scene_seed("test", 0)


def test_scene_and_observation_files_round_trip(tmp_path):
    data = make_dataset(ScenarioConfig(n_frames=6), 0, "train", 2)
    for i, d in enumerate(data):
        write_scene_data(tmp_path, i, d)
    back = read_scene_data(tmp_path, 1)
    assert format_scene(back.scene) == format_scene(data[1].scene)
    for x, y in zip(back.observations, data[1].observations):
        assert np.array_equal(x.raw, y.raw) and x.source_ids == y.source_ids


def test_parse_scene_rejects_out_of_order_frames():
    with pytest.raises(ValueError):
        parse_scene("1 0 0 0 0 1 1 1 0 0 0\n")


def test_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(dt=0.0)
    with pytest.raises(ValueError):
        ScenarioConfig(miss_prob=1.5)
