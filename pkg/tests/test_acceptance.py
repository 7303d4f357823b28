"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import itertools
import json
import math
import time

import numpy as np
import pytest

from gradcheck import check_gradients, leaf, relative_error
from metric_oracle import eligible_pairs, max_matching, random_instance
from pairnet.fusion import build_predictions, matching_cost, triplet_matching
from pairnet.heatmap import inspect_image, read_pgm, write_pgm
from pairnet.layers import MLP, Conv2d, Linear, MultiHeadAttention, Parameter
from pairnet.losses import cross_entropy, focal_loss, seesaw_loss
from pairnet.metrics import (GroundTruth, MetricsReport, RankedTriplets, pair_recall_at_k,
                             random_pair_baseline, recall_at_k)
from pairnet.model import PairNet
from pairnet.oracle import (EmbeddingTable, OracleConfig, assign_queries, assignment_cost,
                            oracle_queries)
from pairnet.ppn import CNNMatrixLearner, MLPMatrixLearner, TopKSelection, ppn_loss
from pairnet.presets import standard_synth_config, standard_train_config
from pairnet.synth import SynthConfig, synthesize
from pairnet.trainer import (TrainConfig, evaluate_model, image_losses, load_run, save_run,
                             split_indices, train, untrained_model)
from pairnet.tensor import Tensor


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} | {detail}")
        assert ok, f"criterion {number}: {detail}"
    return emit


def _randomized(module, rng, scale=0.5):
    for p in module.parameters():
        p.data[...] = scale * rng.standard_normal(p.shape)
    return module


def _sampled_check(build, leaves, rng, n_coords=40, h=1e-5):
    """Finite differences on a random subset of parameter coordinates."""
    out = build()
    for p in leaves:
        p.zero_grad()
    out.backward()
    sizes = np.array([p.data.size for p in leaves])
    picks = rng.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric = [], []
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        p, idx = leaves[i], np.unravel_index(flat - offsets[i], leaves[i].shape)
        analytic.append(p.grad[idx])
        old = p.data[idx]
        p.data[idx] = old + h
        plus = float(build().data)
        p.data[idx] = old - h
        minus = float(build().data)
        p.data[idx] = old
        numeric.append((plus - minus) / (2 * h))
    return relative_error(np.array(analytic), np.array(numeric))


def _composite_case(seed):
    rng = np.random.default_rng(seed)
    data = synthesize(SynthConfig(n_scenes=1, height=6, width=6, min_segments=3, max_segments=5,
                                  mean_relations=2.0, seed=seed))
    config = TrainConfig.from_dict(dict(n_queries=5, dim=4, n_rel=6, decoder_layers=1, heads=2,
                                        relation_loss=dict(kind="focal"),
                                        oracle=dict(noise=0.1, seed=seed)))
    data.graphs[0].triplets = data.graphs[0].triplets[:config.n_rel]
    model = PairNet(config.model_config(data.n_object_classes, data.n_relation_classes))
    model.ppn.learner = CNNMatrixLearner(rng, 2, 3)
    _randomized(model, rng)
    table = EmbeddingTable.create(data.n_object_classes, config.oracle)
    build = lambda: image_losses(model, data.scenes[0], data.graphs[0], table, config)[0]  # noqa: E731
    return build, model.parameters(), rng


def test_criterion_1_gradient_integrity(verdict):
    started = time.perf_counter()
    worst = {}

    def record(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for i in range(20):
        rng = np.random.default_rng(10_000 + i)
        lin = Linear(rng, 4, 3)
        x = leaf(rng.standard_normal((3, 4)))
        record("linear", check_gradients(lambda: lin(x), [x] + lin.parameters(), seed=i))

        conv = Conv2d(rng, 2, 3, 3)
        img = leaf(rng.standard_normal((2, 5, 5)))
        record("conv2d", check_gradients(lambda: conv(img), [img] + conv.parameters(), seed=i))

        attn = _randomized(MultiHeadAttention(rng, 8, 2), rng)
        q, kv = leaf(rng.standard_normal((3, 8))), leaf(rng.standard_normal((4, 8)))
        pq, pk, pv = (Parameter(rng.standard_normal(s)) for s in [(3, 8), (4, 8), (4, 8)])
        record("attention", check_gradients(lambda: attn(q, kv, kv, pq, pk, pv)[0],
                                            [q, kv, pq, pk, pv] + attn.parameters(), seed=i))

        proj = _randomized(MLP(rng, [6, 6, 6, 6]), rng)
        qo = leaf(rng.standard_normal((5, 6)))
        record("projectors", check_gradients(lambda: proj(qo), [qo] + proj.parameters(), seed=i))

        cnn = _randomized(CNNMatrixLearner(rng, 3, 3), rng)
        mlp = _randomized(MLPMatrixLearner(rng, 5, 6), rng)
        m = leaf(rng.uniform(-1, 1, (5, 5)))
        record("matrix learner", max(
            check_gradients(lambda: cnn(m), [m] + cnn.parameters(), seed=i),
            check_gradients(lambda: mlp(m), [m] + mlp.parameters(), seed=i)))

        build, params, crng = _composite_case(i)
        record("composite loss", _sampled_check(build, params, crng))
    elapsed = time.perf_counter() - started
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(1, ok, f"worst relative error over 20 instances each: {detail}; {elapsed:.1f}s")


def _assignment_total(cost, cols):
    # exactly rounded, so assignments using the same cost multiset compare equal
    return math.fsum(cost[np.arange(cost.shape[0]), np.asarray(cols)])


def _brute_force_minimum(cost):
    n, k = cost.shape
    return min(_assignment_total(cost, p) for p in itertools.permutations(range(k), n))


def test_criterion_2_assignment_optimality(verdict):
    rng = np.random.default_rng(2)
    mismatches = 0
    # query <-> segment assignment on degraded oracle outputs
    for trial in range(200):
        data = synthesize(SynthConfig(n_scenes=1, height=5, width=5, min_segments=2,
                                      max_segments=5, n_object_classes=4, n_stuff_classes=1,
                                      seed=trial))
        cfg = OracleConfig(n_queries=int(rng.integers(5, 7)), dim=4, noise=0.5, flip_prob=0.4,
                           perturb_rate=0.5, seed=trial)
        scene = data.scenes[0]
        qs = oracle_queries(scene, EmbeddingTable.create(4, cfg), cfg)
        cost = assignment_cost(scene, qs)
        a = assign_queries(scene, qs)
        cols = [a.query_of(s.id) for s in scene.segments]
        mismatches += _assignment_total(cost, cols) != _brute_force_minimum(cost)
    # triplet matching
    for trial in range(200):
        k = int(rng.integers(1, 7))
        n = int(rng.integers(1, min(k, 5) + 1))
        sel = TopKSelection(rng.integers(0, 4, k), rng.integers(0, 4, k), np.zeros(k))
        preds = build_predictions(sel, rng.standard_normal((4, 4)) * 2,
                                  rng.standard_normal((k, 4)) * 2)
        gt = [tuple(int(v) for v in rng.integers(1, 4, size=3)) for _ in range(n)]
        cost = matching_cost(preds, gt)
        slots = triplet_matching(preds, gt)
        mismatches += _assignment_total(cost, slots) != _brute_force_minimum(cost)
    verdict(2, mismatches == 0, f"{mismatches} cost mismatches over 400 instances (exact equality)")


def test_criterion_3_loss_identities(verdict):
    rng = np.random.default_rng(3)
    worst_focal = worst_seesaw = worst_ppn = 0.0
    for _ in range(50):
        z = rng.standard_normal((7, 5)) * 3
        t = rng.integers(0, 5, 7)
        ce = float(cross_entropy(Tensor(z), t).data)
        worst_focal = max(worst_focal, abs(float(focal_loss(Tensor(z), t, 0.0).data) - ce))
        counts = np.full(5, float(rng.integers(1, 1000)))
        worst_seesaw = max(worst_seesaw,
                           abs(float(seesaw_loss(Tensor(z), t, counts, q_comp=0.0).data) - ce))
        n = int(rng.integers(2, 25))
        s = int(rng.integers(1, n * n + 1))
        gt = np.zeros(n * n)
        gt[rng.choice(n * n, s, replace=False)] = 1
        p = n * n / s
        closed = np.log(2) * (n * n - s + p * s) / (n * n)
        worst_ppn = max(worst_ppn, abs(float(ppn_loss(Tensor(np.zeros((n, n))),
                                                      gt.reshape(n, n)).data) - closed))
    ok = max(worst_focal, worst_seesaw, worst_ppn) <= 1e-12
    verdict(3, ok, f"max deviation focal {worst_focal:.1e}, seesaw {worst_seesaw:.1e}, "
                   f"ppn closed form {worst_ppn:.1e} (tolerance 1e-12)")


def test_criterion_4_metric_oracle(verdict):
    rng = np.random.default_rng(4)
    disagreements = 0
    for _ in range(50):
        scene, graph, pred = random_instance(rng, max_gt=6, max_pred=10)
        gt = GroundTruth(scene, graph)
        for use_rel in (True, False):
            ours = recall_at_k(pred, gt, 20, use_relation=use_rel).sum()
            disagreements += ours != max_matching(
                eligible_pairs(pred, scene, graph, 20, use_rel), len(graph.triplets))
    violations = 0
    for _ in range(300):
        scene, graph, pred = random_instance(rng, max_pred=int(rng.integers(1, 130)))
        gt = GroundTruth(scene, graph)
        r = [recall_at_k(pred, gt, k).mean() for k in (20, 50, 100)]
        p = [pair_recall_at_k(pred, gt, k).mean() for k in (20, 50, 100)]
        violations += not (r[0] <= r[1] <= r[2]) or any(pk < rk for pk, rk in zip(p, r))
    ok = disagreements == 0 and violations == 0
    verdict(4, ok, f"{disagreements} oracle disagreements on 50 instances, "
                   f"{violations} monotonicity/dominance violations on 300 fuzzed inputs")


def _one_relation_per_pair(dataset):
    for graph in dataset.graphs:
        seen, kept = set(), []
        for s, r, o in graph.triplets:
            if (s, o) not in seen:
                seen.add((s, o))
                kept.append((s, r, o))
        graph.triplets = kept
    return dataset


def test_criterion_5_pipeline_upper_bound(verdict):
    data = _one_relation_per_pair(synthesize(standard_synth_config(n_scenes=40, seed=5)))
    config = standard_train_config(oracle=dict(noise=0.0))
    model = untrained_model(config, data)
    big = 50.0

    def pair_logits(scene, graph, qs, assignment):
        m = np.full((qs.n_queries, qs.n_queries), -big)
        for s, _, o in graph.triplets:
            m[assignment.query_of(s), assignment.query_of(o)] = big
        return m

    def relation_logits(scene, graph, qs, assignment, selection):
        rel = {(assignment.query_of(s), assignment.query_of(o)): r for s, r, o in graph.triplets}
        logits = np.zeros((len(selection), data.n_relation_classes + 1))
        for t, cell in enumerate(selection.cells()):
            logits[t, rel.get(cell, 0)] = big
        return logits

    report = evaluate_model(model, config, data, [20, 50, 100], pair_logits_fn=pair_logits,
                            relation_logits_fn=relation_logits)
    ok = all(v == 1.0 for v in report.recall.values()) and report.pq == 1.0
    verdict(5, ok, f"R@K {report.recall}, PQ {report.pq} over {report.image_count} images")


@pytest.fixture(scope="module")
def standard_runs():
    data = synthesize(standard_synth_config())
    config = standard_train_config()
    model, record = train(config, data)
    _, val_idx = split_indices(len(data.scenes), config.val_count)
    val = data.subset(val_idx)
    untrained = evaluate_model(untrained_model(config, data), config, val)
    baseline = random_pair_baseline([GroundTruth(s, g) for s, g in zip(val.scenes, val.graphs)],
                                    config.n_queries, 20)
    ablation_config = standard_train_config(ppn_positive_weight=1.0)
    _, ablation = train(ablation_config, data)
    return dict(record=record, untrained=untrained, baseline=baseline, ablation=ablation)


def test_criterion_6_desk_scale_learning(verdict, standard_runs):
    record = standard_runs["record"]
    final = MetricsReport.from_dict(json.loads(json.dumps(record.epoch_reports[-1])))
    pair, rec = final.pair_recall[20], final.recall[20]
    untrained = standard_runs["untrained"].pair_recall[20]
    baseline = standard_runs["baseline"]
    first, last = record.epoch_losses[0]["ppn"], record.epoch_losses[-1]["ppn"]
    a = pair >= 3 * untrained and pair >= 5 * baseline
    b = rec >= 0.5 * pair
    c = last <= 0.5 * first
    verdict(6, a and b and c,
            f"(a) pair-R@20 {pair:.3f} vs untrained {untrained:.3f} (x{pair / untrained:.1f}) "
            f"and baseline {baseline:.3f} (x{pair / baseline:.1f}) {'ok' if a else 'FAIL'}; "
            f"(b) R@20 {rec:.3f} vs 0.5*pair {0.5 * pair:.3f} {'ok' if b else 'FAIL'}; "
            f"(c) L_ppn {first:.3f} -> {last:.3f} ({100 * (1 - last / first):.0f}% drop) "
            f"{'ok' if c else 'FAIL'}; {record.wall_clock / 60:.1f} min")


def test_criterion_7_positive_weight_ablation(verdict, standard_runs):
    weighted = standard_runs["record"].epoch_reports[-1]["pair_recall"][20]
    unweighted = standard_runs["ablation"].epoch_reports[-1]["pair_recall"][20]
    verdict(7, unweighted <= 0.5 * weighted,
            f"pair-R@20 with p=1 {unweighted:.3f} vs weighted {weighted:.3f} "
            f"(ratio {unweighted / weighted:.2f}, needs <= 0.50)")


def test_criterion_8_determinism_and_persistence(verdict, tmp_path):
    data = synthesize(standard_synth_config(n_scenes=40, seed=8))
    config = standard_train_config(epochs=2, val_count=8)
    model, first = train(config, data)
    _, second = train(standard_train_config(epochs=2, val_count=8), data)
    same_losses = first.step_losses == second.step_losses
    report = evaluate_model(model, config, data)
    ckpt = save_run(tmp_path / "run", model, config, first)
    loaded, loaded_config = load_run(ckpt)
    same_report = evaluate_model(loaded, loaded_config, data) == report
    report_path = tmp_path / "report.json"
    report_path.write_text(report.to_json())
    json_ok = MetricsReport.from_dict(json.loads(report_path.read_text())) == report
    sidecar = inspect_image(loaded, loaded_config, data, data.scenes[-1].image_id, tmp_path / "h")
    pgm_ok = True
    for panel in sidecar["panels"].values():
        path = tmp_path / "h" / panel["file"]
        gray = read_pgm(path)
        write_pgm(tmp_path / "again.pgm", gray)
        pgm_ok &= (list(gray.shape) == panel["shape"]
                   and (tmp_path / "again.pgm").read_bytes() == path.read_bytes())
    ok = same_losses and same_report and json_ok and pgm_ok
    verdict(8, ok, f"loss sequence identical: {same_losses} ({len(first.step_losses)} steps); "
                   f"report after checkpoint round-trip identical: {same_report}; "
                   f"JSON re-parse: {json_ok}; PGM re-parse: {pgm_ok}")


def test_criterion_9_duplicate_resistance(verdict):
    rng = np.random.default_rng(9)
    data = synthesize(standard_synth_config(n_scenes=30, seed=9))
    results = []
    for scene, graph in zip(data.scenes, data.graphs):
        if not graph.triplets:
            continue
        s, r, o = graph.triplets[int(rng.integers(len(graph.triplets)))]
        masks = np.array([scene.segment_map == seg.id for seg in scene.segments])
        cat = {seg.id: seg.category for seg in scene.segments}
        pred = RankedTriplets(np.full(20, s - 1), np.full(20, o - 1), np.full(20, cat[s]),
                              np.full(20, cat[o]), np.full(20, r), np.ones(20), masks)
        value = recall_at_k(pred, GroundTruth(scene, graph), 20).mean()
        results.append(value == 1 / len(graph.triplets))
    verdict(9, all(results), f"{sum(results)}/{len(results)} images score exactly 1/|GT| "
                             f"with one correct triplet repeated 20 times")
