"""Tests for the continual-learning episode runner."""

import numpy as np
import pytest

from memseg.episode import (
    EpisodeSettings,
    MemoryConfig,
    make_tasks,
    run_episode,
)
from memseg.pipeline import EncoderConfig, bbox_of, encode, encode_prompt, predict
from memseg.synth import NoiseConfig, TaskSpec, gen_frame

FAST = EpisodeSettings(volumes_per_task=1, slices_per_volume=4)


def quick_tasks(count=2, corrupt=0.0, sigma=0.5):
    return make_tasks(
        count,
        NoiseConfig(label_corrupt_prob=corrupt, feature_noise_sigma=sigma),
    )


def test_report_schema_well_formed():
    tasks = quick_tasks(1)
    for retrieval in ("none", "confidence_similarity"):
        report = run_episode(tasks, MemoryConfig(retrieval=retrieval), [0], FAST)
        assert len(report.per_seed) == 1
        row = report.per_seed[0]
        assert 0.0 <= row["mean_dsc"] <= 1.0
        for task_row in row["per_task"]:
            assert 0.0 <= task_row["stream_dsc_mean"] <= 1.0
            assert 0.0 <= task_row["dsc_before"] <= 1.0
            assert 0.0 <= task_row["dsc_after"] <= 1.0
            assert task_row["forgetting"] == pytest.approx(
                task_row["dsc_before"] - task_row["dsc_after"]
            )
        assert len(row["memory_snapshots"]) == len(tasks)
        assert "mean_dsc" in report.aggregate
        assert report.config["memory"]["retrieval"] == retrieval


def test_capacity_zero_equals_retrieval_none_bitwise():
    tasks = quick_tasks(2, corrupt=0.2)
    r_zero = run_episode(tasks, MemoryConfig(capacity=0, retrieval="confidence_similarity"), [3], FAST)
    r_none = run_episode(tasks, MemoryConfig(capacity=640, retrieval="none"), [3], FAST)
    assert (
        r_zero.per_seed[0]["prediction_digest"]
        == r_none.per_seed[0]["prediction_digest"]
    )


def test_episode_deterministic_byte_identical():
    tasks = quick_tasks(2, corrupt=0.3)
    cfg = MemoryConfig(capacity=16)
    a = run_episode(tasks, cfg, [0, 1], FAST)
    b = run_episode(tasks, cfg, [0, 1], FAST)
    assert a.to_json() == b.to_json()


def test_memory_causality_prefix_equality():
    # streaming later tasks must not change earlier tasks' phase results
    tasks = quick_tasks(3, corrupt=0.2)
    full = run_episode(tasks, MemoryConfig(capacity=640), [7], FAST)
    prefix = run_episode(tasks[:1], MemoryConfig(capacity=640), [7], FAST)
    row_full = full.per_seed[0]["per_task"][0]
    row_prefix = prefix.per_seed[0]["per_task"][0]
    for key in ("stream_dsc_mean", "stream_dsc_std", "mean_confidence", "dsc_before"):
        assert row_full[key] == row_prefix[key], key


def test_memory_fills_and_snapshots_monotone():
    tasks = quick_tasks(2)
    report = run_episode(tasks, MemoryConfig(capacity=640), [0], FAST)
    snaps = report.per_seed[0]["memory_snapshots"]
    assert snaps[0]["count"] > 0
    assert snaps[1]["count"] >= snaps[0]["count"]
    assert snaps[1]["capacity"] == 640


def test_small_capacity_respected():
    tasks = quick_tasks(2)
    report = run_episode(tasks, MemoryConfig(capacity=4), [0], FAST)
    for snap in report.per_seed[0]["memory_snapshots"]:
        assert snap["count"] <= 4


def test_retrieval_log_emitted_when_enabled():
    settings = EpisodeSettings(
        volumes_per_task=1, slices_per_volume=4, log_retrievals=True
    )
    tasks = quick_tasks(1)
    report = run_episode(tasks, MemoryConfig(capacity=640), [0], settings)
    log = report.per_seed[0]["retrieval_log"]
    assert log, "expected at least one retrieval event"
    for event in log:
        assert event["scores"] == sorted(event["scores"], reverse=True)
        assert len(event["indices"]) <= 4


def test_confidence_off_scores_are_pure_similarity():
    # with the confidence term disabled the logged combined scores collapse
    # to bare cosines, which live in [-1, 1]
    settings = EpisodeSettings(
        volumes_per_task=1, slices_per_volume=4, log_retrievals=True
    )
    tasks = quick_tasks(1)
    off = run_episode(
        tasks,
        MemoryConfig(capacity=640, use_confidence=False),
        [0],
        settings,
    )
    for event in off.per_seed[0]["retrieval_log"]:
        assert all(-1.0 <= s <= 1.0 for s in event["scores"])
    on = run_episode(tasks, MemoryConfig(capacity=640), [0], settings)
    assert any(
        s > 1.0 for event in on.per_seed[0]["retrieval_log"] for s in event["scores"]
    )


def test_corrupted_frames_get_lower_confidence():
    # statistical: over >= 1000 frames, corrupted labels disagree with the
    # image content so their oracle confidence is lower on average
    cfg = EncoderConfig()
    task = TaskSpec(
        0, "ct", 100,
        noise=NoiseConfig(label_corrupt_prob=0.5, feature_noise_sigma=1.0),
    )
    clean, corrupt = [], []
    n = 0
    seed = 0
    while n < 1000:
        frame = gen_frame(task, n % 8, seed)
        seed += 1
        if frame.mask.sum() == 0:
            continue
        n += 1
        e, _ = encode(frame, [], cfg)
        prompt = encode_prompt(bbox_of(frame.mask), cfg.image_size)
        _, y_hat = predict(e, prompt, frame, cfg, miscalibration=0.0)
        (corrupt if frame.is_corrupted else clean).append(y_hat)
    assert len(clean) > 100 and len(corrupt) > 100
    gap = np.mean(clean) - np.mean(corrupt)
    stderr = np.sqrt(np.var(clean) / len(clean) + np.var(corrupt) / len(corrupt))
    assert gap > 3.0 * stderr


def test_validation_errors():
    with pytest.raises(ValueError):
        MemoryConfig(retrieval="nearest")
    with pytest.raises(ValueError):
        MemoryConfig(capacity=-1)
    with pytest.raises(ValueError):
        MemoryConfig(k=0)
    with pytest.raises(ValueError):
        run_episode([], MemoryConfig(), [0], FAST)
    with pytest.raises(ValueError):
        run_episode(quick_tasks(1), MemoryConfig(), [], FAST)
    with pytest.raises(ValueError):
        make_tasks(0, NoiseConfig())
