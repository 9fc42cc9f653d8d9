"""Acceptance criteria, one test per criterion.

Each test prints a ``PASS``/``FAIL`` line before asserting, so ``pytest -s``
(or running this file directly) gives the summary even when a criterion fails.
The ablation and pretraining criteria use the default synthetic task and the
default training settings; expect several minutes on one core.
"""

import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from convitac import tensor as T
from convitac import tensorfile
from convitac.analysis import AblationConfig, ablation_run, direction_wins, pca_2d, summarize
from convitac.contrastive import (ContrastiveEncoder, PretrainConfig, freeze, nt_xent_loss,
                                  pretrain, retrieval_accuracy, similarity_matrix)
from convitac.pipeline import (ConViTacModel, ModelConfig, Split, TrainConfig, load_checkpoint,
                               predict, save_checkpoint, train_supervised)
from convitac.synthdata import SynthSpec, generate_dataset
from convitac.tensor import Tensor
from convitac.vit import EncoderConfig

FUSIONS = ("add", "concat", "sws")


def report(number: int, ok: bool, detail: str) -> None:
    print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}", flush=True)
    assert ok, detail


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    generate_dataset(SynthSpec(), root)
    return root


@pytest.fixture(scope="module")
def splits(data_dir):
    return Split.from_manifest(data_dir / "train.csv"), Split.from_manifest(data_dir / "test.csv")


@pytest.fixture(scope="module")
def pretrained(splits):
    train, test = splits
    encoder = ContrastiveEncoder(EncoderConfig())
    start = time.perf_counter()
    record = pretrain(encoder, train.visual, train.tactile, PretrainConfig(),
                      eval_pairs=(test.visual, test.tactile, test.labels))
    return freeze(encoder), record, time.perf_counter() - start


@pytest.fixture(scope="module")
def ablation(splits):
    train, test = splits
    return ablation_run(train, test, AblationConfig(fusions=FUSIONS))


def _unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _loss64(emb, tau):
    with T.precision(np.float64):
        return float(nt_xent_loss(similarity_matrix(Tensor(emb), tau), len(emb) // 2).values)


def test_criterion_01_gradient_suite():
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "convitac.cli", "gradcheck"],
                          capture_output=True, text=True)
    seconds = time.perf_counter() - start
    rows = [line.split(",") for line in proc.stdout.splitlines()[1:] if not line.startswith("#")]
    worst = max(float(r[1]) for r in rows)
    has_model = any(r[0] == "convitac_model" for r in rows)
    ok = proc.returncode == 0 and has_model and worst < 1e-3 and seconds < 60
    report(1, ok, f"{len(rows)} checks incl. full model, worst rel error {worst:.2e}, "
                  f"{seconds:.1f}s (< 1e-3, < 60s)")


def test_criterion_02_contrastive_closed_forms():
    rng = np.random.default_rng(0)
    single = _loss64(_unit(rng, 2, 16), 0.07)
    equal = _loss64(np.tile(_unit(rng, 1, 16), (4, 1)), 0.07)
    worst = 0.0
    for _ in range(100):
        b = int(rng.integers(1, 9))
        tau = float(rng.choice([0.05, 0.07, 0.2, 0.5, 1.0]))
        emb = _unit(rng, 2 * b, int(rng.integers(2, 33)))
        oracle = 0.0
        for i in range(2 * b):
            logits = [float(emb[i] @ emb[k]) / tau for k in range(2 * b) if k != i]
            pos = float(emb[i] @ emb[(i + b) % (2 * b)]) / tau
            oracle -= pos - math.log(math.fsum(math.exp(v) for v in logits))
        worst = max(worst, abs(_loss64(emb, tau) - oracle))
    ok = single == 0.0 and abs(equal - 4 * math.log(3)) < 1e-5 and worst < 1e-5
    report(2, ok, f"B=1 loss {single}, B=2 equal loss {equal:.8f} vs 4ln3 {4 * math.log(3):.8f}, "
                  f"oracle max diff {worst:.1e} over 100 trials")


def test_criterion_03_similarity_contracts():
    rng = np.random.default_rng(1)
    worst = 0.0
    invariant = True
    for _ in range(50):
        b = int(rng.integers(2, 9))
        emb = _unit(rng, 2 * b, 16)
        sim = similarity_matrix(Tensor(emb, dtype=np.float64), 0.07).values.copy()
        with T.precision(np.float64):
            masked = float(nt_xent_loss(Tensor(sim), b).values)
            np.fill_diagonal(sim, -1e9)
            finite = float(nt_xent_loss(Tensor(sim), b).values)
        worst = max(worst, abs(masked - finite))
        argmaxes = [np.argmax(similarity_matrix(Tensor(emb), tau).values, axis=1)
                    for tau in (0.05, 0.07, 0.5, 1.0)]
        invariant &= all(np.array_equal(a, argmaxes[0]) for a in argmaxes)
    report(3, worst < 1e-6 and invariant,
           f"-inf vs -1e9 diagonal max loss diff {worst:.1e}; row argmax tau-invariant: {invariant}")


def test_criterion_04_pretraining_efficacy(pretrained, splits):
    encoder, record, seconds = pretrained
    _, test = splits
    cls = retrieval_accuracy(encoder, test.visual, test.tactile, test.labels)
    inst = retrieval_accuracy(encoder, test.visual, test.tactile)
    epochs = len(record.loss)
    ok = epochs <= 30 and cls >= 0.80 and seconds < 300
    report(4, ok, f"held-out same-class top-1 retrieval {cls:.3f} (instance-level {inst:.3f}) "
                  f"after {epochs} epochs in {seconds:.1f}s")


def test_criterion_05_condition_beats_none(ablation):
    wins, seeds = direction_wins(ablation, "both", "none", "concat", strict=True)
    accs = {(r["condition"], r["seed"]): r["eval_acc"] for r in ablation if r["fusion"] == "concat"}
    detail = ", ".join(f"s{s}: {accs[('none', s)]:.3f}->{accs[('both', s)]:.3f}"
                       for s in sorted({s for _, s in accs}))
    report(5, wins >= 4, f"concat: both > none in {wins}/{seeds} seeds ({detail})")


def test_criterion_06_cec_not_worse_per_fusion(ablation):
    parts, ok = [], True
    for fusion in FUSIONS:
        wins, seeds = direction_wins(ablation, "both", "none", fusion, strict=False)
        ok &= wins >= 4
        parts.append(f"{fusion} {wins}/{seeds}")
    means = {(s["condition"], s["fusion"]): s["mean"] for s in summarize(ablation)}
    detail = "; ".join(f"{f} {means[('none', f)]:.3f}->{means[('both', f)]:.3f}" for f in FUSIONS)
    report(6, ok, f"both >= none seeds: {', '.join(parts)} (means {detail})")


def test_criterion_07_freeze_contract(pretrained, splits):
    encoder, _, _ = pretrained
    train, test = splits
    before = [p.values.tobytes() for p in encoder.parameters()]
    model = ConViTacModel(ModelConfig(), encoder)
    train_supervised(model, Split(train.visual, train.tactile, train.labels),
                     Split(test.visual, test.tactile, test.labels), TrainConfig(epochs=3))
    after = [p.values.tobytes() for p in encoder.parameters()]
    grads = [p.grad for p in encoder.parameters()]
    ok = before == after and all(g is None for g in grads)
    report(7, ok, f"{len(before)} contrastive tensors bit-identical after a supervised run: {ok}")


def test_criterion_08_attention_invariants(pretrained, splits):
    encoder, _, _ = pretrained
    _, test = splits
    cfg = EncoderConfig()
    p = cfg.num_patches
    worst_sum, worst_perm, rows_ok = 0.0, 0.0, True
    rng = np.random.default_rng(2)
    for frames in (1, 2):
        idx = np.arange(4 * frames)
        v = test.visual[idx, 0].reshape(4, frames, *test.visual.shape[2:])
        t = test.tactile[idx, 0].reshape(4, frames, *test.tactile.shape[2:])
        for fusion in FUSIONS:
            model = ConViTacModel(ModelConfig(frames=frames, fusion=fusion), encoder)
            res = model.forward(v, t)
            rows_ok &= res.aligned.shape[1] == 2 * frames * p
            for a in model.cec.attention_maps():
                worst_sum = max(worst_sum, float(np.abs(a.sum(-1) - 1.0).max()))
            perm = rng.permutation(res.fused.shape[1])
            queries = model._queries(model.condition_rows(v, t))
            base = model.cec(queries, res.fused).values
            shuffled = model.cec(queries, Tensor(res.fused.values[:, perm])).values
            worst_perm = max(worst_perm, float(np.abs(base - shuffled).max()))
    ok = rows_ok and worst_sum < 1e-6 and worst_perm < 1e-6
    report(8, ok, f"row-sum error {worst_sum:.1e}, output rows = 2NP for N in (1, 2) and every "
                  f"fusion: {rows_ok}, key/value permutation diff {worst_perm:.1e}")


def test_criterion_09_pca_oracle(pretrained, splits):
    encoder, _, _ = pretrained
    _, test = splits
    rng = np.random.default_rng(3)
    inputs = [encoder.embed_pooled(np.concatenate([test.visual[:, 0], test.tactile[:, 0]]))]
    for d in (2, 8, 32, 64):
        basis = np.linalg.qr(rng.standard_normal((d, d)))[0]
        inputs.append(rng.standard_normal((300, d)) * np.linspace(2.0, 0.2, d) @ basis)
    worst_val, worst_orth = 0.0, 0.0
    for x in inputs:
        x = np.asarray(x, dtype=np.float64)
        proj = pca_2d(x)
        eig = np.linalg.eigh(np.cov(x, rowvar=False))[0][::-1]
        worst_val = max(worst_val, float(np.abs(proj.eigenvalues - eig[:2]).max()),
                        float(np.abs(proj.explained_ratio - eig[:2] / eig.sum()).max()))
        worst_orth = max(worst_orth,
                         float(np.abs(proj.components @ proj.components.T - np.eye(2)).max()))
    ok = worst_val < 1e-6 and worst_orth < 1e-6
    report(9, ok, f"top-2 variance diff vs dense eigh {worst_val:.1e}, "
                  f"orthonormality error {worst_orth:.1e} (D <= 64)")


def _run_cli(args):
    proc = subprocess.run([sys.executable, "-m", "convitac.cli"] + args,
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.suffix != ".png"}


def test_criterion_10_determinism(data_dir, tmp_path):
    trees = []
    for run in ("a", "b"):
        enc, out = tmp_path / run / "encoder", tmp_path / run / "train"
        _run_cli(["pretrain", "--data", str(data_dir), "--out", str(enc), "--seed", "3",
                  "--no-plots"])
        _run_cli(["train", "--data", str(data_dir), "--out", str(out), "--encoder", str(enc),
                  "--seed", "3", "--no-plots"])
        trees.append((_tree_bytes(enc), _tree_bytes(out)))
    same = trees[0] == trees[1]
    files = len(trees[0][0]) + len(trees[0][1])
    report(10, same and "metrics.csv" in trees[0][1],
           f"{files} files (metrics.csv, checkpoint, encoder) byte-identical across two runs: {same}")


def test_criterion_11_serialization(pretrained, splits, tmp_path):
    encoder, _, _ = pretrained
    _, test = splits
    results = []
    for fusion in FUSIONS:
        model = ConViTacModel(ModelConfig(fusion=fusion, seed=5), encoder)
        before = predict(model, Split(test.visual, test.tactile, test.labels))
        save_checkpoint(model, tmp_path / fusion)
        after = predict(load_checkpoint(tmp_path / fusion),
                        Split(test.visual, test.tactile, test.labels))
        results.append(before.tobytes() == after.tobytes())
    rng = np.random.default_rng(4)
    arrays = [np.float32(1.5), np.zeros((0, 3), np.float32), rng.standard_normal((2, 3, 4, 5)),
              np.array([np.nan, np.inf, -np.inf, -0.0, 1e-45], np.float32)]
    arrays += [rng.standard_normal(rng.integers(1, 6, size=rng.integers(1, 5))) for _ in range(20)]
    round_trip = all(
        tensorfile.decode(tensorfile.encode(a)).tobytes() == np.asarray(a, "<f4").tobytes()
        and tensorfile.decode(tensorfile.encode(a)).shape == np.shape(a)
        for a in arrays
    )
    ok = all(results) and round_trip
    report(11, ok, f"save->load->forward bit-identical for {sum(results)}/{len(results)} fusion "
                   f"kinds; CVT1 round trip bit-exact on {len(arrays)} arrays: {round_trip}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-s", "-q"]))
