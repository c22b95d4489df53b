import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leafcascade.cascade import (PRESETS, CascadeConfig, Decided, Defer, EvalReport, Plausible, StageKnowledge,
                                 aggregate_patches, evaluate, preset, run_cascade, stage1_decide, stage2_decide,
                                 stage3_decide, top_k)
from leafcascade.netdef import StageUnavailable
from leafcascade.preprocess import LeafImage

from conftest import ScriptedStage, peaked

MK = PRESETS["mk"]
UNREACHABLE = CascadeConfig(min_prob_seg=2, min_delta_seg=2, min_mean_L1L2pred=2, min_prob_whole=2,
                            min_delta_whole=2, min_mean_L1L3pred=2, min_mean_L2L3pred=2, min_prob_patch=2,
                            min_delta_patch=2, vote_rate=2, vote_merge_rate=2, top_seg=3, top_whole=3,
                            min_leaf_fraction=0.5)


# -- config ---------------------------------------------------------------


def test_preset_values():
    mk, fl = preset("mk"), preset("flavia")
    assert (mk.min_prob_seg, mk.min_delta_seg, mk.top_seg, mk.min_mean_L1L2pred, mk.min_prob_whole,
            mk.min_delta_whole, mk.top_whole, mk.P) == (0.98, 0.95, 10, 0.80, 0.89, 0.85, 6, 7)
    assert (fl.min_prob_seg, fl.min_delta_seg, fl.top_seg, fl.min_mean_L1L2pred, fl.min_prob_whole,
            fl.min_delta_whole, fl.top_whole, fl.P) == (0.95, 0.91, 6, 0.70, 0.78, 0.60, 10, 7)
    for c in (mk, fl):
        assert (c.min_mean_L1L3pred, c.min_mean_L2L3pred, c.min_prob_patch, c.min_delta_patch, c.vote_rate,
                c.vote_merge_rate) == (0.60, 0.60, 0.95, 0.85, 0.71, 0.56)


def test_config_text_round_trip(tmp_path):
    cfg = PRESETS["flavia"]
    text = cfg.dumps()
    assert "min_mean_L1L2pred=0.7\n" in text and "P=7\n" in text
    assert CascadeConfig.loads(text) == cfg
    cfg.save(tmp_path / "c.cfg")
    assert CascadeConfig.load(tmp_path / "c.cfg") == cfg


def test_config_rejects_unknown_key():
    with pytest.raises(ValueError):
        CascadeConfig.loads("min_prob_sag=0.5\n")


def test_config_partial_file_keeps_defaults():
    cfg = CascadeConfig.loads("# tuned\nvote_rate = 0.5\nstage3_gate=intersection\n")
    assert cfg.vote_rate == 0.5 and cfg.stage3_gate == "intersection" and cfg.min_prob_seg == 0.98


def test_config_validation():
    with pytest.raises(ValueError):
        CascadeConfig(top_seg=0).validate()
    with pytest.raises(ValueError):
        MK.validate(class_count=5)  # top_seg 10 > 5 classes
    MK.validate(class_count=44)


# -- top_k / stage 1 ------------------------------------------------------


def test_top_k_tie_break():
    assert top_k(np.full(4, 0.25), 2).classes == [0, 1]


def test_top_k_single():
    assert top_k([0.1, 0.7, 0.2], 1).entries == ((1, 0.7),)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=30), st.data())
def test_top_k_matches_sort(vals, data):
    k = data.draw(st.integers(1, len(vals)))
    expected = sorted(range(len(vals)), key=lambda c: (-vals[c], c))[:k]
    assert top_k(vals, k).classes == expected


def test_stage1_min_prob():
    assert stage1_decide(peaked(44, 5, 0.99), MK) == Decided(5, 1, "min_prob_seg")


def test_stage1_uniform_defers_with_top_seg():
    d = stage1_decide(np.full(44, 1 / 44), MK)
    assert isinstance(d, Defer) and len(d.knowledge) == 10 and d.knowledge.classes == list(range(10))


def test_stage1_min_delta():
    d = stage1_decide(peaked(44, 3, 0.97, 0.01, 7), MK)
    assert d == Decided(3, 1, "min_delta_seg")


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.001, 1), min_size=3, max_size=12), st.floats(0, 1), st.floats(0, 1))
def test_stage1_monotone_in_min_prob(raw, t, bump):
    p = np.asarray(raw) / sum(raw)
    cfg = CascadeConfig(min_prob_seg=t, top_seg=2)
    raised = CascadeConfig(min_prob_seg=t + bump, top_seg=2)
    if isinstance(stage1_decide(p, cfg), Defer):
        assert isinstance(stage1_decide(p, raised), Defer)


# -- stage 2 --------------------------------------------------------------


def k1_from(p1, n=10):
    return top_k(p1, n)


def test_stage2_mean_rule():
    p1 = peaked(44, 4, 0.85)
    p2 = peaked(44, 4, 0.80)
    assert stage2_decide(p2, k1_from(p1), MK) == Decided(4, 2, "min_mean_L1L2pred")


def test_stage2_gate_blocks_outside_classes():
    p1 = peaked(44, 4, 0.5, 0.3, 6)
    k1 = top_k(p1, 2)  # {4, 6}
    d = stage2_decide(peaked(44, 20, 0.999), k1, MK)
    assert isinstance(d, Defer) and len(d.knowledge) == 6 and d.knowledge.top_class == 20


def test_stage2_min_prob_whole():
    p1 = peaked(44, 4, 0.5, 0.3, 6)
    d = stage2_decide(peaked(44, 6, 0.90), k1_from(p1), MK)
    assert d == Decided(6, 2, "min_prob_whole")


def test_stage2_requires_knowledge():
    with pytest.raises(ValueError):
        stage2_decide(peaked(4, 0, 0.9), StageKnowledge(()), MK)


# -- stage 3 --------------------------------------------------------------


def test_aggregate_patches():
    np.testing.assert_array_equal(aggregate_patches([[0.2, 0.8]]), [0.2, 0.8])
    np.testing.assert_array_equal(aggregate_patches([[1, 0], [0, 1]]), [0.5, 0.5])
    with pytest.raises(ValueError):
        aggregate_patches([])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 10), st.integers(1, 9), st.integers(0, 2**16))
def test_aggregate_is_probability_vector(k, n, seed):
    vs = np.random.default_rng(seed).dirichlet(np.ones(k), size=n)
    m = aggregate_patches(list(vs))
    assert (m >= 0).all() and abs(m.sum() - 1) < 1e-5


def stage3_case(k=8):
    p1 = peaked(k, 0, 0.4, 0.3, 1)
    p2 = peaked(k, 1, 0.4, 0.3, 2)
    return p1, p2, top_k(p1, 3), top_k(p2, 3)


def test_stage3_mean_l1l3():
    k = 8
    p1 = peaked(k, 2, 0.6, 0.2, 3)
    p2 = peaked(k, 3, 0.5, 0.2, 2)
    p3 = peaked(k, 2, 0.7)  # (0.6 + 0.7) / 2 = 0.65
    out = stage3_decide(p3, [2] * 7, top_k(p1, 3), top_k(p2, 3), MK, p1, p2)
    assert out.verdict == Decided(2, 3, "min_mean_L1L3pred")


def test_stage3_patch_vote_five_of_seven():
    p1, p2, k1, k2 = stage3_case()
    p3 = peaked(8, 5, 0.5)  # class 5 is outside both carried sets
    out = stage3_decide(p3, [5, 5, 5, 5, 5, 0, 1], k1, k2, MK, p1, p2)
    assert isinstance(out.verdict, Plausible) and out.verdict.method == "patch_vote"
    assert out.verdict.class_id == 5 and out.verdict.ranking[0][1] == pytest.approx(5 / 7)


def test_stage3_four_of_seven_goes_to_merged_vote():
    # stages 1 and 2 both vote for class 1, both above the 0.445 floor
    p1 = peaked(8, 1, 0.47, 0.4, 0)
    p2 = peaked(8, 1, 0.46, 0.3, 2)
    p3 = peaked(8, 5, 0.5)
    out = stage3_decide(p3, [5, 5, 5, 5, 6, 0, 1], top_k(p1, 3), top_k(p2, 3), MK, p1, p2)
    assert out.verdict.method == "merged_vote" and out.verdict.class_id == 1


def test_stage3_ranked_fallback_when_votes_fail():
    p1, p2, k1, k2 = stage3_case()
    p3 = peaked(8, 5, 0.5)
    out = stage3_decide(p3, [5, 5, 6, 6, 7, 0, 1], k1, k2, MK, p1, p2)
    v = out.verdict
    assert v.method == "ranked_fallback"
    scores = [s for _, s in v.ranking]
    assert scores == sorted(scores, reverse=True) and len(v.ranking) == 8


def test_stage3_intersection_gate():
    p1, p2, k1, k2 = stage3_case()
    k2 = top_k(p2, 2)  # {1, 2}
    p3 = peaked(8, 0, 0.99)  # class 0 is in k1 but not k2
    union = stage3_decide(p3, [0] * 7, k1, k2, MK, p1, p2)
    inter = stage3_decide(p3, [0] * 7, k1, k2, CascadeConfig(stage3_gate="intersection"), p1, p2)
    assert union.decided and not inter.decided


def test_plausible_rankings_are_non_increasing():
    rng = np.random.default_rng(0)
    for _ in range(300):
        p1, p2, p3 = rng.dirichlet(np.ones(6), size=3)
        preds = list(rng.integers(0, 6, 7))
        out = stage3_decide(p3, preds, top_k(p1, 2), top_k(p2, 2), UNREACHABLE, p1, p2)
        scores = [s for _, s in out.verdict.ranking]
        assert scores == sorted(scores, reverse=True) and scores


# -- driver ---------------------------------------------------------------

K = 6
HW = 16


def make_leaf(sample_id):
    """16x16 leaf whose mask bottom row and rgb plane 1 both encode ``sample_id``."""
    mask = np.ones((1, HW, HW), np.uint8)
    for j in range(12):
        mask[0, HW - 1, j] = (sample_id >> j) & 1
    rgb = np.zeros((3, HW, HW), np.float32)
    rgb[1] = sample_id / 4096
    return LeafImage(rgb, mask)


def id_from_mask(x):
    row = np.asarray(x)[0, HW - 1, :12]
    return int(sum(int(round(v)) << j for j, v in enumerate(row)))


def id_from_rgb(x):
    return int(round(float(np.asarray(x)[1, 0, 0]) * 4096))


def scripted_models(p1s, p2s, p3s):
    s = ScriptedStage((1, HW, HW), K, lambda x: p1s[id_from_mask(x)])
    w = ScriptedStage((3, HW, HW), K, lambda x: p2s[id_from_rgb(x)])
    p = ScriptedStage((3, 8, 8), K, lambda x: p3s[id_from_rgb(x)])
    return {"s": s, "w": w, "p": p}


SMALL = CascadeConfig(top_seg=3, top_whole=3, min_leaf_fraction=0.5)


def test_stage1_decision_skips_later_stages():
    models = scripted_models({1: peaked(K, 2, 0.99)}, {}, {})
    out = run_cascade(make_leaf(1), models, SMALL)
    assert out.verdict == Decided(2, 1, "min_prob_seg")
    assert (models["s"].calls, models["w"].calls, models["p"].calls) == (1, 0, 0)


def test_zero_thresholds_stage1_always_decides():
    zero = CascadeConfig(min_prob_seg=0, min_delta_seg=0, top_seg=3, top_whole=3)
    models = scripted_models({7: peaked(K, 4, 0.3)}, {}, {})
    out = run_cascade(make_leaf(7), models, zero)
    assert out.decided and out.predicted == 4 and out.final_stage == 1


def test_unreachable_thresholds_reach_stage3():
    u = np.full(K, 1 / K)
    models = scripted_models({3: u}, {3: u}, {3: u})
    out = run_cascade(make_leaf(3), models, UNREACHABLE)
    assert not out.decided and out.stage_reached == 3 and out.verdict.method == "ranked_fallback"
    assert models["p"].calls == UNREACHABLE.P


def test_stage3_decides_with_patches():
    p1 = peaked(K, 1, 0.5, 0.3, 2)
    p2 = peaked(K, 2, 0.5, 0.3, 1)
    models = scripted_models({9: p1}, {9: p2}, {9: peaked(K, 2, 0.97)})
    out = run_cascade(make_leaf(9), models, SMALL)
    assert out.verdict.stage == 3 and out.predicted == 2
    assert len(out.trace["patch_origins"]) == SMALL.P


def test_stage3_unavailable_degrades_to_ranked_list():
    def boom(_):
        raise StageUnavailable("down")

    models = scripted_models({1: peaked(K, 1, 0.4)}, {1: peaked(K, 1, 0.4)}, {})
    models["p"] = ScriptedStage((3, 8, 8), K, boom)
    out = run_cascade(make_leaf(1), models, SMALL)
    assert out.verdict.method == "ranked_fallback" and "unavailable" in out.trace


def test_patch_shortfall_uses_found_patches(monkeypatch):
    from leafcascade import cascade
    from leafcascade.preprocess import PatchSet, PatchShortfall

    def short(leaf, P, patch_px, *a, **kw):
        found = PatchSet([leaf.rgb[:, :patch_px, :patch_px]] * 3, [(0, 0)] * 3)
        raise PatchShortfall(3, P, found)

    monkeypatch.setattr(cascade, "extract_patches", short)
    models = scripted_models({}, {2: peaked(K, 1, 0.4)}, {2: peaked(K, 1, 0.99)})
    models["s"] = ScriptedStage((1, HW, HW), K, lambda x: peaked(K, 1, 0.4))
    out = run_cascade(make_leaf(2), models, SMALL)
    assert models["p"].calls == 3 and out.trace["patch_shortfall"] == 3
    assert out.decided and out.predicted == 1


def test_patches_may_repeat_a_single_window():
    leaf = make_leaf(2)
    mask = np.zeros((1, HW, HW), np.uint8)
    mask[0, :8, :8] = 1  # only the top-left 8x8 window is fully covered
    models = scripted_models({}, {2: peaked(K, 1, 0.4)}, {2: peaked(K, 1, 0.99)})
    models["s"] = ScriptedStage((1, HW, HW), K, lambda x: peaked(K, 1, 0.4))
    cfg = CascadeConfig(top_seg=3, top_whole=3, min_leaf_fraction=1.0)
    out = run_cascade(LeafImage(leaf.rgb, mask), models, cfg)
    assert out.trace["patch_origins"] == [[0, 0]] * cfg.P


def test_no_patches_falls_back_to_first_two_stages():
    leaf = make_leaf(2)
    leaf = LeafImage(leaf.rgb, np.zeros_like(leaf.mask))
    models = scripted_models({}, {2: peaked(K, 1, 0.4)}, {})
    models["s"] = ScriptedStage((1, HW, HW), K, lambda x: peaked(K, 1, 0.4))
    out = run_cascade(leaf, models, SMALL)
    assert out.verdict.method == "ranked_fallback" and models["p"].calls == 0


def test_jobs_do_not_change_outcome():
    p1 = peaked(K, 1, 0.5, 0.3, 2)
    p2 = peaked(K, 2, 0.5, 0.3, 1)
    models = scripted_models({9: p1}, {9: p2}, {9: peaked(K, 3, 0.6)})
    a = run_cascade(make_leaf(9), models, SMALL)
    b = run_cascade(make_leaf(9), models, SMALL, jobs=4)
    assert a.to_dict() == b.to_dict()


@settings(max_examples=60, deadline=None)
@given(st.permutations(list(range(K))), st.integers(0, 2**16))
def test_permutation_equivariance(perm, seed):
    rng = np.random.default_rng(seed)
    # distinct probabilities avoid tie-breaking by class id
    p1, p2, p3 = (v / v.sum() for v in rng.permutation(np.arange(1, 3 * K + 1) ** 2)[:3 * K].reshape(3, K))
    perm = np.asarray(perm)
    inv = np.argsort(perm)
    cfg = CascadeConfig(min_prob_seg=0.3, min_delta_seg=0.2, top_seg=2, top_whole=2, min_mean_L1L2pred=0.25,
                        min_prob_whole=0.3, min_delta_whole=0.2, min_leaf_fraction=0.5)
    base = run_cascade(make_leaf(1), scripted_models({1: p1}, {1: p2}, {1: p3}), cfg)
    moved = run_cascade(make_leaf(1), scripted_models({1: p1[inv]}, {1: p2[inv]}, {1: p3[inv]}), cfg)
    # class c in the original labelling is class perm[c] after relabelling
    assert moved.predicted == perm[base.predicted]
    assert type(moved.verdict) is type(base.verdict)


def test_models_must_share_class_count():
    models = scripted_models({}, {}, {})
    models["w"] = ScriptedStage((3, HW, HW), K + 1, lambda x: None)
    with pytest.raises(ValueError):
        run_cascade(make_leaf(0), models, SMALL)


def test_outcome_json():
    models = scripted_models({1: peaked(K, 2, 0.99)}, {}, {})
    d = run_cascade(make_leaf(1), models, SMALL).to_dict()
    assert d["verdict"] == {"type": "Decided", "class_id": 2, "stage": 1, "rule": "min_prob_seg"}
    assert len(d["trace"]["p1"]) == K


# -- evaluation -----------------------------------------------------------


def test_evaluate_oracle_models_decide_at_stage1():
    labels = [i % K for i in range(30)]
    p1s = {i: peaked(K, labels[i], 0.99) for i in range(30)}
    models = scripted_models(p1s, {}, {})
    report = evaluate([(make_leaf(i), labels[i]) for i in range(30)], models, SMALL)
    assert report.processed == [30, 0, 0] and report.overall_accuracy == 1.0
    assert models["w"].calls == 0


def test_evaluate_uniform_reaches_stage3():
    u = np.full(K, 1 / K)
    table = {i: u for i in range(12)}
    report = evaluate([(make_leaf(i), 0) for i in range(12)], scripted_models(table, table, table), UNREACHABLE)
    assert report.processed == [0, 0, 12] and report.plausible == 12
    assert report.plausible_coverage == 1.0  # list covers every class


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate([], scripted_models({}, {}, {}), SMALL)


def test_averaged_counts_arithmetic():
    runs = [((252, 45, 7), (252, 45, 7)), ((251, 44, 9), (250, 43, 9)), ((252, 46, 6), (252, 45, 6)),
            ((250, 48, 6), (250, 48, 6)), ((252, 50, 2), (250, 50, 2))]
    reports = [EvalReport.from_counts(p, c) for p, c in runs]
    expected = [1.0, 0.9934, 0.9967, 1.0, 0.9934]
    for r, e in zip(reports, expected):
        assert r.total == 304
        assert r.overall_accuracy == pytest.approx(e, abs=5e-5)
    avg = EvalReport.average(reports)
    assert avg.processed == pytest.approx([251.4, 46.6, 6]) and avg.correct == pytest.approx([250.8, 46.2, 6])
    assert avg.overall_accuracy == pytest.approx(0.9967, abs=5e-5)
    assert "99.67%" in avg.format_table()
