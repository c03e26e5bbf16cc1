"""End-to-end acceptance checks, one test per criterion.

The desk-scale comparison (criteria 5-7) trains six models of 2000 iterations
each and takes about an hour on one CPU core.  Everything else runs in
seconds.  A summary line per criterion is printed at the end of the session.
"""

import re
import time

import numpy as np
import pytest

from vigait import checkpoint as ck
from vigait.autodiff import Tensor
from vigait.cli import main
from vigait.data import load_dataset
from vigait.data.synth import generate
from vigait.evaluator import EvalProtocol, embed, evaluate, rank1, rank1_hits
from vigait.losses import LossWeights, ce_loss, mine_all, triplet_loss
from vigait.model import ModelConfig, ViGaitModel
from vigait.trainer import Adam, TrainConfig, gradcheck_model, make_checkpoint, tiny_model_config, train

from oracles import brute_hits, brute_rank1, direct_ce, loop_triplet_loss, random_embedded

ANGLES = [-90.0, -64.0, -39.0, -13.0, 13.0, 39.0, 64.0, 90.0]
SEEDS = (0, 1, 2)
ITERATIONS = 2000


def run_config(seed: int, iterations: int = ITERATIONS) -> TrainConfig:
    return TrainConfig(
        learning_rate=3e-3,
        lr_drop=(0.3, 1500),
        iterations=iterations,
        p=4,
        k=4,
        frames=8,
        seed=seed,
        weights=LossWeights(lambda_ce=3.0),
    )


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    generate(root, subjects=20, views=ANGLES, seqs_per_view=4, frames=24, seed=7)
    index = load_dataset(root)
    return index.load_all(index.subjects[:10]), index.load_all(index.subjects[10:])


@pytest.fixture(scope="module")
def comparison(dataset, tmp_path_factory):
    """Baseline and Vi models trained with identical seeds and settings."""
    train_seqs, test_seqs = dataset
    out = tmp_path_factory.mktemp("runs")
    runs = {}
    for seed in SEEDS:
        for variant in ("baseline", "vi"):
            model_cfg = ModelConfig(num_views=len(ANGLES), use_bank=variant == "vi")
            start = time.process_time()
            res = train(train_seqs, model_cfg, run_config(seed))
            cpu = time.process_time() - start
            path = out / f"{variant}{seed}.ckpt"
            ck.save(res.checkpoint, path)
            report = evaluate(res.model, test_seqs, EvalProtocol())
            runs[variant, seed] = dict(result=res, report=report, cpu=cpu, path=path)
    return runs


def test_criterion_1_gradient_integrity(acceptance_record):
    start = time.process_time()
    errors = gradcheck_model(tiny_model_config(3), p=2, k=2, frames=2, samples=5)
    cpu = time.process_time() - start
    worst = max(errors.values())
    ok = worst < 1e-4 and cpu < 60 and len(errors) >= 10
    acceptance_record(1, ok, f"max rel err {worst:.2e} over {len(errors)} tensors, {cpu:.1f}s CPU")
    assert ok


def test_criterion_2_loss_oracles(acceptance_record):
    rng = np.random.default_rng(2)
    trip_err = ce_err = 0.0
    for _ in range(50):
        p, k = rng.integers(2, 4, size=2)
        labels = np.repeat(np.arange(p), k)
        feats = rng.normal(size=(len(labels), 3, 4)) * 0.3
        got = triplet_loss(Tensor(feats), mine_all(labels), 0.2).item()
        trip_err = max(trip_err, abs(got - loop_triplet_loss(feats, labels, 0.2)))
        logits = rng.normal(size=(6, 5)) * 2
        ys = rng.integers(0, 5, 6)
        ce_err = max(ce_err, abs(ce_loss(Tensor(logits), ys).item() - direct_ce(logits, ys)))
    counts_ok = all(
        len(mine_all(np.repeat(np.arange(p), k))) == p * k * (k - 1) * (p - 1) * k
        for p in range(2, 6)
        for k in range(2, 6)
    )
    ok = trip_err < 1e-10 and ce_err < 1e-12 and counts_ok
    acceptance_record(2, ok, f"triplet err {trip_err:.1e}, CE err {ce_err:.1e}, mining counts {'ok' if counts_ok else 'wrong'}")
    assert ok


def test_criterion_3_pass_through(dataset, acceptance_record):
    train_seqs, _ = dataset
    base = ViGaitModel(ModelConfig(num_views=len(ANGLES), use_bank=False), seed=5)
    vi = ViGaitModel(ModelConfig(num_views=len(ANGLES), bank_init="identity"), seed=5)
    pairs = [(embed(base, s), embed(vi, s)) for s in train_seqs[::40]]
    ok = all(np.array_equal(a[0], b[0]) and a[1] == b[1] for a, b in pairs)
    acceptance_record(3, ok, f"{len(pairs)} sequences, embeddings {'bitwise equal' if ok else 'differ'}")
    assert ok


def test_criterion_4_gradient_isolation(dataset, acceptance_record):
    train_seqs, _ = dataset
    view = 3
    only_v = [s for s in train_seqs if s.view == view]
    model_cfg = ModelConfig(num_views=len(ANGLES))
    cfg = TrainConfig(learning_rate=1e-2, iterations=1, p=4, k=2, frames=4, seed=1, selection_mode="ground-truth")
    before = ViGaitModel(model_cfg, seed=cfg.seed).parameters()
    after = train(only_v, model_cfg, cfg).model.parameters()
    others = [k for k in after if k.startswith("bank.") and not k.startswith(f"bank.v{view}.")]
    untouched = all(after[k].data.tobytes() == before[k].data.tobytes() for k in others)
    moved = any(not np.array_equal(after[k].data, before[k].data) for k in after if k.startswith(f"bank.v{view}."))
    ok = untouched and moved
    acceptance_record(4, ok, f"{len(others)} other-view matrices unchanged: {untouched}; view {view} updated: {moved}")
    assert ok


def test_criterion_5_vi_vs_baseline(comparison, acceptance_record):
    base = [comparison["baseline", s]["report"].overall_mean for s in SEEDS]
    vi = [comparison["vi", s]["report"].overall_mean for s in SEEDS]
    wins = sum(v > b for v, b in zip(vi, base))
    slowest = max(r["cpu"] for r in comparison.values()) / 60
    finite = all(np.isfinite(row["joint"]) for r in comparison.values() for row in r["result"].log)
    ok = np.mean(vi) >= np.mean(base) - 2.0 and wins >= 2 and slowest <= 15 and finite
    detail = (
        f"rank-1 Vi {np.mean(vi):.1f} {[round(float(v), 1) for v in vi]} vs baseline {np.mean(base):.1f} "
        f"{[round(float(b), 1) for b in base]}, Vi wins {wins}/3, slowest run {slowest:.1f} min CPU"
    )
    acceptance_record(5, ok, detail)
    assert ok


def test_criterion_6_view_accuracy(comparison, acceptance_record):
    accs = [comparison["vi", s]["report"].view_accuracy for s in SEEDS]
    ok = min(accs) >= 90.0
    acceptance_record(6, ok, f"test-split view accuracy per seed {[round(float(a), 1) for a in accs]}")
    assert ok


def largest_difference(path, capsys) -> float:
    capsys.readouterr()
    assert main(["inspect", "--model", str(path)]) == 0
    text = capsys.readouterr().out
    return float(re.search(r"largest relative difference over all strips/pairs: (\S+)", text).group(1))


def test_criterion_7_bank_differences(comparison, tmp_path, capsys, acceptance_record):
    trained = largest_difference(comparison["vi", SEEDS[0]]["path"], capsys)
    untrained_model = ViGaitModel(ModelConfig(num_views=len(ANGLES), bank_init="identity"), seed=0)
    path = tmp_path / "untrained.ckpt"
    ck.save(make_checkpoint(untrained_model, TrainConfig(), Adam(), 0, None), path)
    untrained = largest_difference(path, capsys)
    ok = trained > 0.01 and untrained < 1e-3
    acceptance_record(7, ok, f"trained max ||Za-Zb||/||Za|| = {trained:.3g}, untrained identity bank {untrained:.3g}")
    assert ok


def test_criterion_8_protocol_oracle(acceptance_record):
    rng = np.random.default_rng(8)
    mismatches = 0
    for exclude in (True, False):
        for _ in range(100):
            views = int(rng.integers(1, 4))
            g = random_embedded(rng, int(rng.integers(1, 10)), int(rng.integers(1, 6)), views)
            p = random_embedded(rng, int(rng.integers(1, 10)), int(rng.integers(1, 6)), views)
            hits = [None if np.isnan(h) else bool(h) for h in rank1_hits(g, p, exclude)]
            cells = rank1(g, p, list(range(views)), exclude).cells["ALL"]
            expected = brute_rank1(g, p, views, exclude)
            same_cells = all(
                (a is None and b is None) or (a is not None and b is not None and abs(a - b) < 1e-9)
                for a, b in zip(cells, expected)
            )
            mismatches += hits != brute_hits(g, p, exclude) or not same_cells
    ok = mismatches == 0
    acceptance_record(8, ok, f"{mismatches} mismatches in 200 instances")
    assert ok


def test_criterion_9_reproducibility(dataset, tmp_path, acceptance_record):
    train_seqs, test_seqs = dataset
    model_cfg = ModelConfig(num_views=len(ANGLES))
    a = train(train_seqs, model_cfg, run_config(11, iterations=10))
    b = train(train_seqs, model_cfg, run_config(11, iterations=10))
    same_ckpt = ck.to_bytes(a.checkpoint) == ck.to_bytes(b.checkpoint)
    reports = [evaluate(r.model, test_seqs[:64], EvalProtocol()).to_tsv() for r in (a, b)]
    same_report = reports[0] == reports[1]

    ck.save(a.checkpoint, tmp_path / "a.ckpt")
    ck.save(ck.load(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    round_trip = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    half = train(train_seqs, model_cfg, run_config(11, iterations=5))
    ck.save(half.checkpoint, tmp_path / "half.ckpt")
    resumed = train(train_seqs, model_cfg, run_config(11, iterations=10), resume=ck.load(tmp_path / "half.ckpt"))
    resume_ok = ck.to_bytes(resumed.checkpoint) == ck.to_bytes(a.checkpoint)

    ok = same_ckpt and same_report and round_trip and resume_ok
    acceptance_record(
        9,
        ok,
        f"same-seed checkpoints {same_ckpt}, reports {same_report}, save/load {round_trip}, resume 5+5 {resume_ok}",
    )
    assert ok
