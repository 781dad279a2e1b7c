import json

import pytest

from tangrambench.dataset import Mode, SceneAnnotation, generate_synthetic, make_task
from tangrambench.geometry import Placement
from tangrambench.proposal import NoisyOracleBackend, OracleParams, ReplayBackend
from tangrambench.refine import (
    LOCAL_SEARCH_STEPS,
    NEIGHBOR_OFFSETS,
    LoopConfig,
    RefineTrace,
    RewardParams,
    Scorer,
    TraceInvariantError,
    IterationEntry,
    local_search,
    refine_loop,
    reward,
    reward_value,
)

GT = SceneAnnotation("tri", (Placement("medium-triangle", (5.0, 5.0), 0.0, 1.0),))
TASK = make_task(GT, Mode.POS)


def offset_for(target_iou, params=RewardParams()):
    """Largest x-offset whose IoU still exceeds target (IoU falls monotonically with dx here)."""
    scorer = Scorer(TASK, GT, params)
    lo, hi = 0.0, 2.5
    for _ in range(60):
        mid = (lo + hi) / 2
        if scorer.iou([{"pos": (5.0 + mid, 5.0)}]) > target_iou:
            lo = mid
        else:
            hi = mid
    return lo


def replay_with(ious):
    responses = {}
    for t, v in enumerate(ious, 1):
        dx = offset_for(v)
        responses[("tri", t)] = json.dumps({"pos": [5.0 + dx, 5.0]})
    return ReplayBackend(responses)


class TestReward:
    def test_gt_candidate(self):
        r, iou, l2 = reward([{"pos": (5.0, 5.0)}], GT, TASK)
        assert (r, iou, l2) == (1.0, 1.0, 0.0)

    def test_arithmetic(self):
        assert reward_value(0.65, 1.0, 0.1) == 0.64
        assert reward_value(0.932, 0.0, 0.1) == 0.932
        assert reward_value(0.932, 0.0, 5.0) == 0.932

    def test_lambda_must_be_positive(self):
        with pytest.raises(ValueError):
            RewardParams(lam=0)

    def test_penalty_uses_position_only_by_default(self):
        p = Scorer(make_task(GT, Mode.ALL), GT, RewardParams())
        r, iou, l2 = p([{"pos": (5.0, 5.0), "angle": 30.0, "size": 1.0}])
        assert r == iou and l2 == 0.0


class TestLoop:
    def test_exact_oracle_stops_immediately(self):
        res = refine_loop(TASK, GT, NoisyOracleBackend({"tri": GT}), [], LoopConfig(k=0))
        assert res.best_iou == 1.0
        assert len(res.trace.entries) == 1 and res.trace.stop_reason == "threshold"

    def test_best_tracking_and_early_stop(self):
        backend = replay_with((0.4, 0.7, 0.6, 0.95, 0.99))
        res = refine_loop(TASK, GT, backend, [], LoopConfig(T=6, tau=0.9, k=0), RewardParams(lam=1e-9))
        entries = res.trace.entries
        ious = [e.iou for e in entries]
        # raster quantisation puts each candidate within a pixel step of its target
        assert ious == pytest.approx([0.4, 0.7, 0.6, 0.95], abs=0.01)
        assert [e.best_iou for e in entries] == [ious[0], ious[1], ious[1], ious[3]]
        assert [e.accepted_as_best for e in entries] == [True, True, False, True]
        assert res.trace.stop_reason == "threshold"
        assert [e.feedback_hint_used for e in entries] == [False, True, True, True]
        assert res.trace.local_search == []

    def test_hint_carries_previous_best(self):
        seen = []

        class Spy(ReplayBackend):
            def propose(self, bundle):
                seen.append(bundle.feedback_hint)
                return super().propose(bundle)

        backend = Spy(replay_with((0.4, 0.7)).responses)
        refine_loop(TASK, GT, backend, [], LoopConfig(T=2, k=0, local_search_enabled=False))
        assert seen[0] is None and "previous IoU=0.40." in seen[1]

    def test_parse_failure_budget(self):
        responses = {("tri", t): "I cannot answer" for t in range(1, 7)}
        res = refine_loop(TASK, GT, ReplayBackend(responses), [], LoopConfig(T=6, k=0))
        assert res.best_fields is None and res.trace.stop_reason == "parse-failure-budget"
        assert len(res.trace.entries) == 3

    def test_parse_failure_consumes_iteration(self):
        responses = {("tri", 1): "nope", ("tri", 2): json.dumps({"pos": [5.0, 5.0]})}
        res = refine_loop(TASK, GT, ReplayBackend(responses), [], LoopConfig(T=2, k=0))
        assert res.best_iou == 1.0 and res.trace.entries[0].parse_error

    def test_exhausted_loop_runs_local_search(self):
        backend = replay_with((0.5, 0.55))
        res = refine_loop(TASK, GT, backend, [], LoopConfig(T=2, tau=0.9, k=0))
        assert res.trace.stop_reason == "exhausted"
        assert res.trace.local_search
        assert res.best_iou > 0.55

    def test_single_shot_config(self):
        cfg = LoopConfig.single_shot(k=15)
        assert cfg.is_single_shot and cfg.T == 1 and not cfg.local_search_enabled

    def test_calibrated_oracle_reaches_target(self):
        scenes = generate_synthetic(50, "single", ["medium-triangle"], seed=7)
        backend = NoisyOracleBackend({s.scene_id: s for s in scenes}, OracleParams(sigma_pos=0.25, seed=1))
        finals = []
        for s in scenes:
            pool = [p for p in scenes if p.scene_id != s.scene_id]
            finals.append(refine_loop(make_task(s, Mode.POS), s, backend, pool, LoopConfig()).best_iou)
        assert sum(finals) / len(finals) >= 0.90


class TestInvariants:
    def test_decreasing_best_reward_is_caught(self):
        trace = RefineTrace("x")
        trace.entries = [
            IterationEntry(1, "", [], 0.5, 0.5, 0, True, False, 0.5, 0.5),
            IterationEntry(2, "", [], 0.4, 0.4, 0, True, True, 0.4, 0.4),
        ]
        with pytest.raises(TraceInvariantError):
            trace.check_invariants(0.9)

    def test_false_threshold_stop_is_caught(self):
        trace = RefineTrace("x", stop_reason="threshold")
        trace.entries = [IterationEntry(1, "", [], 0.5, 0.5, 0, True, False, 0.5, 0.5)]
        with pytest.raises(TraceInvariantError):
            trace.check_invariants(0.9)


class TestLocalSearch:
    def test_neighbour_order_is_row_major(self):
        assert NEIGHBOR_OFFSETS[0] == (-1, -1) and NEIGHBOR_OFFSETS[-1] == (1, 1)
        assert len(NEIGHBOR_OFFSETS) == 8 and LOCAL_SEARCH_STEPS == (0.6, 0.3, 0.15)

    def test_fixed_point_at_optimum(self):
        log = []
        fields, iou = local_search([{"pos": (5.0, 5.0)}], GT, TASK, log=log)
        assert fields == [{"pos": (5.0, 5.0)}] and iou == 1.0
        assert not any(e.accepted for e in log)

    def test_recovers_a_step_sized_displacement(self):
        log = []
        fields, iou = local_search([{"pos": (5.6, 5.0)}], GT, TASK, log=log)
        assert iou >= 0.995
        assert fields[0]["pos"] == pytest.approx((5.0, 5.0))
        assert all(e.step == 0.6 for e in log if e.accepted)

    def test_accepted_moves_strictly_improve(self):
        log = []
        start = [{"pos": (5.5, 4.4)}]
        start_iou = Scorer(TASK, GT, RewardParams()).iou(start)
        _, iou = local_search(start, GT, TASK, log=log)
        accepted = [e.iou for e in log if e.accepted]
        assert all(b > a for a, b in zip(accepted, accepted[1:]))
        assert iou >= start_iou

    def test_two_piece_moves_each_piece(self):
        a = generate_synthetic(1, "two-piece", seed=3)[0]
        task = make_task(a, Mode.TWO_POS)
        start = [{"pos": (p.pos[0] + 0.3, p.pos[1] - 0.3)} for p in a.pieces]
        log = []
        _, iou = local_search(start, a, task, log=log)
        assert {e.piece for e in log if e.accepted} == {0, 1}
        assert iou > 0.95

    def test_rejects_non_positional_modes(self):
        with pytest.raises(ValueError):
            local_search([{"angle": 0.0}], GT, make_task(GT, Mode.ANGLE))
