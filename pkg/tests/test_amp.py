import json

import numpy as np
import pytest

from fixquant import toys
from fixquant.amp import (
    CandidatePair,
    bit_ops,
    build_pareto,
    choose_mixed_precision,
    find_layer_groups,
    max_threads,
    sensitivity_analysis,
)
from fixquant.errors import CacheError, EncodingError
from fixquant.graph_ir import GraphModel, Node
from fixquant.quantsim import compute_encodings, create_quantsim

CANDS = [(16, 16), (16, 8), (8, 16), (8, 8)]


def calibrated_sim(seed=0, width=6):
    model = toys.three_group_model(seed=seed, width=width)
    sim = create_quantsim(model)
    compute_encodings(sim, toys.random_feed((32, width), n_batches=2, seed=seed + 1))
    return sim


def make_eval(sim, width=6):
    """Deterministic accuracy proxy: closeness to the float forward pass.

    Evaluates strictly inside the calibrated range so the score reflects
    rounding precision, not clipping.
    """
    x = toys.random_feed((32, width), n_batches=2, seed=1)[0] * 0.8
    ref = sim.graph.forward(x)

    def ev(s):
        return -float(np.mean((s.forward(x) - ref) ** 2))

    return ev


class Counting:
    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, s):
        self.calls += 1
        return self.fn(s)


class TestCandidatePair:
    def test_of_accepts_tuples_lists_and_pairs(self):
        c = CandidatePair.of((16, 8))
        assert (c.activation_bw, c.param_bw) == (16, 8)
        assert CandidatePair.of([8, 4]).as_list() == [8, 4]
        assert CandidatePair.of(c) is c

    def test_bitwidth_bounds(self):
        CandidatePair(2, 32)
        with pytest.raises(EncodingError):
            CandidatePair(1, 8)
        with pytest.raises(EncodingError):
            CandidatePair(8, 33)


class TestGrouping:
    def test_mlp_splits_into_three_groups(self):
        sim = calibrated_sim()
        groups = find_layer_groups(sim)
        assert [g.group_id for g in groups] == ["act0+fc0", "act1+fc1", "fc2"]
        # the relu carries the fused activation quantizer, the linear its weight
        g0 = groups[0]
        assert g0.param_keys == ("fc0.weight",)
        assert g0.activation_keys == ("act0",)
        assert groups[2].activation_keys == ("fc2",)

    def test_add_unifies_incoming_branches(self):
        w = np.eye(3)
        b = np.zeros(3)
        nodes = [
            Node("in", "input"),
            Node("fc_a", "linear", inputs=["in"], weights={"weight": w, "bias": b}),
            Node("ra", "relu", inputs=["fc_a"]),
            Node("fc_b", "linear", inputs=["in"], weights={"weight": w, "bias": b}),
            Node("rb", "relu", inputs=["fc_b"]),
            Node("add", "add", inputs=["ra", "rb"]),
            Node("fc_c", "linear", inputs=["add"], weights={"weight": w, "bias": b}),
            Node("out", "output", inputs=["fc_c"]),
        ]
        sim = create_quantsim(GraphModel(nodes, name="branchy"))
        compute_encodings(sim, toys.random_feed((8, 3), n_batches=1))
        ids = [g.group_id for g in find_layer_groups(sim)]
        # both branches must switch bitwidth together or the add sees mixed grids
        assert "fc_a+fc_b+ra+rb" in ids
        assert "fc_c" in ids

    def test_avgpool_moves_with_its_producer(self):
        rng = np.random.default_rng(0)
        nodes = [
            Node("in", "input"),
            Node(
                "conv1",
                "conv2d",
                inputs=["in"],
                weights={"weight": rng.normal(size=(4, 3, 3, 3)), "bias": rng.normal(size=4)},
                attrs={"stride": 1, "padding": 1},
            ),
            Node("relu1", "relu", inputs=["conv1"]),
            Node("ap", "avgpool", inputs=["relu1"], attrs={"kernel": 2, "stride": 2}),
            Node("out", "output", inputs=["ap"]),
        ]
        sim = create_quantsim(GraphModel(nodes, name="poolish"))
        compute_encodings(sim, toys.random_feed((2, 3, 6, 6), n_batches=1))
        groups = {g.group_id: g for g in find_layer_groups(sim)}
        assert "ap+conv1+relu1" in groups
        assert "ap" in groups["ap+conv1+relu1"].activation_keys


class TestBitOps:
    def test_uniform_assignment_is_macs_times_product(self):
        sim = calibrated_sim(width=6)
        groups = find_layer_groups(sim)
        total_macs = 6 * 6 + 6 * 6 + 3 * 6
        assignment = {g.group_id: (8, 8) for g in groups}
        assert bit_ops(sim, assignment, groups) == total_macs * 64

    def test_lowering_one_group_saves_its_share(self):
        sim = calibrated_sim(width=6)
        groups = find_layer_groups(sim)
        hi = {g.group_id: (16, 16) for g in groups}
        lo = dict(hi)
        lo["fc2"] = (8, 8)
        saved = bit_ops(sim, hi, groups) - bit_ops(sim, lo, groups)
        assert saved == (3 * 6) * (256 - 64)


class TestSensitivity:
    def test_one_entry_per_group_and_nonmax_candidate(self, tmp_path):
        sim = calibrated_sim()
        groups = find_layer_groups(sim)
        ev = Counting(make_eval(sim))
        entries = sensitivity_analysis(sim, groups, CANDS, ev, tmp_path)
        assert len(entries) == 3 * 3
        assert ev.calls == 9 + 1  # all-max baseline evaluated once, kept out of the list
        seen = {(e.group_id, (e.candidate.activation_bw, e.candidate.param_bw)) for e in entries}
        assert all(cand != (16, 16) for _, cand in seen)
        assert len(seen) == 9
        doc = json.loads((tmp_path / "accuracy_list.json").read_text())
        assert doc["baseline"] is not None
        assert len(doc["entries"]) == 9

    def test_cached_rerun_performs_no_evaluations(self, tmp_path):
        sim = calibrated_sim()
        groups = find_layer_groups(sim)
        ev = Counting(make_eval(sim))
        first = sensitivity_analysis(sim, groups, CANDS, ev, tmp_path)
        blob = (tmp_path / "accuracy_list.json").read_bytes()
        ev.calls = 0
        second = sensitivity_analysis(sim, groups, CANDS, ev, tmp_path)
        assert ev.calls == 0
        assert second == first
        assert (tmp_path / "accuracy_list.json").read_bytes() == blob

    def test_changing_candidates_rejects_the_stale_cache(self, tmp_path):
        sim = calibrated_sim()
        groups = find_layer_groups(sim)
        ev = Counting(make_eval(sim))
        sensitivity_analysis(sim, groups, CANDS, ev, tmp_path)
        with pytest.raises(CacheError):
            sensitivity_analysis(sim, groups, [(16, 16), (4, 4)], ev, tmp_path)

    def test_interrupted_run_resumes_from_cache(self, tmp_path):
        sim = calibrated_sim()
        groups = find_layer_groups(sim)
        base = make_eval(sim)

        boom = Counting(base)
        real_call = boom.__call__

        def flaky(s):
            if boom.calls >= 4:
                raise RuntimeError("simulated crash")
            return real_call(s)

        with pytest.raises(RuntimeError):
            sensitivity_analysis(sim, groups, CANDS, flaky, tmp_path)
        doc = json.loads((tmp_path / "accuracy_list.json").read_text())
        n_cached = len(doc["entries"])
        assert doc["baseline"] is not None
        assert 0 < n_cached < 9

        ev = Counting(base)
        entries = sensitivity_analysis(sim, groups, CANDS, ev, tmp_path)
        assert ev.calls == 9 - n_cached
        assert len(entries) == 9

    def test_csv_mirror(self, tmp_path):
        sim = calibrated_sim()
        groups = find_layer_groups(sim)
        sensitivity_analysis(sim, groups, CANDS, make_eval(sim), tmp_path)
        lines = (tmp_path / "sensitivity.csv").read_text().strip().splitlines()
        assert lines[0] == "group,candidate,metric"
        assert len(lines) == 1 + 9
        assert any(",16x8," in ln for ln in lines[1:])

    def test_empty_candidates_rejected(self, tmp_path):
        sim = calibrated_sim()
        with pytest.raises(EncodingError):
            sensitivity_analysis(sim, find_layer_groups(sim), [], make_eval(sim), tmp_path)

    def test_multithreaded_run_matches_single_thread(self, tmp_path, monkeypatch):
        sim = calibrated_sim()
        groups = find_layer_groups(sim)
        sensitivity_analysis(sim, groups, CANDS, make_eval(sim), tmp_path / "a")
        monkeypatch.setenv("FIXQUANT_THREADS", "4")
        assert max_threads() == 4
        sensitivity_analysis(sim, groups, CANDS, make_eval(sim), tmp_path / "b")
        assert (tmp_path / "a/accuracy_list.json").read_bytes() == (
            tmp_path / "b/accuracy_list.json"
        ).read_bytes()

    def test_bad_thread_env_falls_back_to_one(self, monkeypatch):
        monkeypatch.setenv("FIXQUANT_THREADS", "lots")
        assert max_threads() == 1


class TestChooseMixedPrecision:
    def test_full_descent_with_generous_budget(self, tmp_path):
        sim = calibrated_sim()
        ev = make_eval(sim)
        out, entries = choose_mixed_precision(sim, CANDS, ev, ev, 10.0, tmp_path)
        assert out is sim
        rels = [e.relative_bit_ops for e in entries]
        assert all(b < a for a, b in zip(rels, rels[1:]))
        # nothing blocks the search, so every group lands on the cheapest pair
        assert rels[-1] == pytest.approx(64 / 256)
        for key in ("fc0.weight", "fc1.weight", "fc2.weight"):
            assert sim.param_quantizers[key].bitwidth == 8
        for nid in ("act0", "act1", "fc2"):
            assert sim.activation_quantizers[nid].bitwidth == 8

    def test_zero_budget_keeps_all_max(self, tmp_path):
        sim = calibrated_sim()
        ev = make_eval(sim)
        # any real quantization error violates a zero allowed drop
        _, entries = choose_mixed_precision(sim, CANDS, ev, ev, 0.0, tmp_path)
        assert entries == []
        for key in ("fc0.weight", "fc1.weight", "fc2.weight"):
            assert sim.param_quantizers[key].bitwidth == 16

    def test_violation_reverts_the_failing_move(self, tmp_path):
        sim = calibrated_sim()
        p1 = make_eval(sim)

        calls = {"n": 0}

        def p2(s):
            calls["n"] += 1
            return 1.0 if calls["n"] <= 3 else 0.0

        _, entries = choose_mixed_precision(sim, [(16, 16), (8, 8)], p1, p2, 0.5, tmp_path)
        # baseline plus two passing moves; the third move fails and is undone
        assert len(entries) == 2
        bws = sorted(sim.param_quantizers[k].bitwidth for k in ("fc0.weight", "fc1.weight", "fc2.weight"))
        assert bws == [8, 8, 16]

    def test_cached_rerun_skips_all_evaluations(self, tmp_path):
        sim = calibrated_sim()
        ev = make_eval(sim)
        _, first = choose_mixed_precision(sim, CANDS, ev, ev, 10.0, tmp_path)
        pareto_blob = (tmp_path / "pareto_list.json").read_bytes()

        sim2 = calibrated_sim()
        p1 = Counting(ev)
        p2 = Counting(ev)
        _, second = choose_mixed_precision(sim2, CANDS, p1, p2, 10.0, tmp_path, clean_start=False)
        assert p1.calls == 0
        assert p2.calls == 0
        assert second == first
        assert (tmp_path / "pareto_list.json").read_bytes() == pareto_blob
        assert sim2.param_quantizers["fc0.weight"].bitwidth == 8

    def test_tighter_budget_replays_a_prefix_without_touching_the_cache(self, tmp_path):
        sim = calibrated_sim()
        ev = make_eval(sim)
        _, entries = choose_mixed_precision(sim, CANDS, ev, ev, 10.0, tmp_path)
        blob = (tmp_path / "pareto_list.json").read_bytes()
        baseline = json.loads(blob)["baseline"]
        # pick a drop that admits some cached moves but not all of them
        drops = sorted(baseline - e.accuracy for e in entries)
        assert drops[-1] > 0
        cutoff = (drops[-1] + drops[-2]) / 2 if len(drops) > 1 else drops[-1] / 2

        sim2 = calibrated_sim()
        _, replayed = choose_mixed_precision(
            sim2, CANDS, ev, ev, cutoff, tmp_path, clean_start=False
        )
        assert (tmp_path / "pareto_list.json").read_bytes() == blob
        assert len(replayed) == len(entries)  # the file still holds the full front

    def test_missing_cache_with_clean_start_false(self, tmp_path):
        sim = calibrated_sim()
        ev = make_eval(sim)
        with pytest.raises(CacheError):
            choose_mixed_precision(sim, CANDS, ev, ev, 1.0, tmp_path, clean_start=False)

    def test_candidate_change_rejects_stale_pareto_cache(self, tmp_path):
        sim = calibrated_sim()
        ev = make_eval(sim)
        choose_mixed_precision(sim, CANDS, ev, ev, 10.0, tmp_path)
        sim2 = calibrated_sim()
        with pytest.raises(CacheError):
            choose_mixed_precision(
                sim2, [(16, 16), (4, 4)], ev, ev, 10.0, tmp_path, clean_start=False
            )

    def test_clean_start_wipes_previous_results(self, tmp_path):
        sim = calibrated_sim()
        ev = make_eval(sim)
        choose_mixed_precision(sim, CANDS, ev, ev, 10.0, tmp_path)
        first = json.loads((tmp_path / "accuracy_list.json").read_text())

        sim2 = calibrated_sim()
        shifted = Counting(lambda s: ev(s) + 1.0)
        choose_mixed_precision(sim2, CANDS, shifted, shifted, 10.0, tmp_path, clean_start=True)
        assert shifted.calls > 0
        second = json.loads((tmp_path / "accuracy_list.json").read_text())
        assert second["baseline"] == pytest.approx(first["baseline"] + 1.0)

    def test_input_validation(self, tmp_path):
        sim = calibrated_sim()
        ev = make_eval(sim)
        with pytest.raises(EncodingError):
            choose_mixed_precision(sim, [], ev, ev, 1.0, tmp_path)
        with pytest.raises(EncodingError):
            choose_mixed_precision(sim, CANDS, ev, ev, -0.1, tmp_path)

    def test_pareto_csv_mirror(self, tmp_path):
        sim = calibrated_sim()
        ev = make_eval(sim)
        _, entries = choose_mixed_precision(sim, CANDS, ev, ev, 10.0, tmp_path)
        lines = (tmp_path / "pareto.csv").read_text().strip().splitlines()
        assert lines[0] == "index,group,candidate,relative_bit_ops,accuracy"
        assert len(lines) == 1 + len(entries)
        assert lines[1].startswith("0,")


class TestBuildParetoDirect:
    def test_handmade_accuracy_list_without_cache(self, tmp_path):
        # all-max equals the sim's current 8-bit state, so no setup pass needed
        from fixquant.amp import AccuracyEntry

        sim = calibrated_sim()
        groups = find_layer_groups(sim)
        cands = [(8, 8), (8, 4)]
        acc = [AccuracyEntry(g.group_id, CandidatePair(8, 4), 0.9) for g in groups]
        ev = make_eval(sim)
        entries = build_pareto(sim, groups, cands, acc, ev, 10.0, tmp_path)
        assert [e.candidate.as_list() for e in entries] == [[8, 4]] * 3

    def test_missing_phase1_entry_raises(self, tmp_path):
        from fixquant.amp import AccuracyEntry

        sim = calibrated_sim()
        groups = find_layer_groups(sim)
        acc = [AccuracyEntry(groups[0].group_id, CandidatePair(8, 4), 0.9)]
        with pytest.raises(CacheError):
            build_pareto(sim, groups, [(8, 8), (8, 4)], acc, make_eval(sim), 10.0, tmp_path)

    def test_empty_accuracy_list_raises(self, tmp_path):
        sim = calibrated_sim()
        groups = find_layer_groups(sim)
        with pytest.raises(CacheError):
            build_pareto(sim, groups, [(8, 8), (8, 4)], [], make_eval(sim), 10.0, tmp_path)
