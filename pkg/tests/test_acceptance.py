"""Acceptance criteria, one test each, at the stated tolerances.

Every test prints ``criterion N: PASS|FAIL  detail`` and the lines are
repeated in the terminal summary. Criteria 5 and 6 train real models and
take several minutes between them.
"""

import itertools
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from onnseg import gradsuite
from onnseg.autograd import Tensor
from onnseg.autograd import ops as F
from onnseg.checkpoint import (CheckpointTruncatedError, DigestMismatchError, WrongMagicError,
                               capture, decode, encode, load_checkpoint, save_checkpoint)
from onnseg.data import clahe, kfold, patient_split, rms_contrast
from onnseg.experiments import ModalityBudget, modality_run, overfit_run
from onnseg.nifti import (TruncatedDataError, NiftiFormatError, Volume, parse_header, read_volume,
                          write_header, write_volume)
from onnseg.nn import ModelConfig, ParamStore, SelfONN, SelfOnnLayerConfig, init_params
from onnseg.objectives import combined_loss, confusion, metrics, soft_dice, soft_jaccard
from onnseg.train import AdamState, TrainState

from test_datapipe import clahe_reference
from test_nifti import handmade_header, headers


def run_criterion(criterion, n, body):
    """``body()`` returns ``(ok, detail)``; exceptions count as failures."""
    try:
        ok, detail = body()
    except Exception as exc:  # report, then let pytest show the traceback
        criterion(n, False, f"raised {type(exc).__name__}: {exc}")
        raise
    criterion(n, ok, detail)
    assert ok, detail


# 1 -------------------------------------------------------------------------

def test_criterion_01_gradient_suite(criterion):
    def body():
        t0 = time.perf_counter()
        results = gradsuite.run_suite("all", seeds=range(5))
        secs = time.perf_counter() - t0
        failed = [r.name for r in results if not r.ok]
        worst = {m: max(r.max_rel_err for r in results if r.module == m)
                 for m in gradsuite.MODULES}
        e2e = next(r for r in results if r.name == "tiny_end_to_end")
        detail = (f"{len(results) - len(failed)}/{len(results)} items, seeds 0-4, {secs:.1f}s; "
                  f"worst ops/blocks {max(worst['tensor-core'], worst['net-blocks']):.1e} "
                  f"losses {worst['objectives']:.1e} end-to-end {e2e.max_rel_err:.1e}"
                  + (f"; failed {failed}" if failed else ""))
        return not failed and secs < 60, detail
    run_criterion(criterion, 1, body)


# 2 -------------------------------------------------------------------------

def test_criterion_02_selfonn_degeneracy(criterion):
    def body():
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(100):
            c, o = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            k = int(rng.choice([1, 3, 5]))
            h, w = (int(v) for v in rng.integers(k, 12, size=2))
            n = int(rng.integers(1, 4))
            layer = SelfONN(ParamStore(int(rng.integers(1 << 30))), "s",
                            SelfOnnLayerConfig(c, o, k, Q=1, pre_activation="none"))
            layer.weights[0].data[...] = rng.standard_normal(layer.weights[0].shape)
            layer.bias.data[...] = rng.standard_normal(o)
            x = Tensor(rng.standard_normal((n, c, h, w)))
            ref = F.conv2d(x, layer.weights[0], layer.bias, 1, k // 2)
            worst = max(worst, float(np.abs(layer(x).data - ref.data).max()))
        return worst <= 1e-12, f"100 draws, max |SelfONN - conv2d| = {worst:.1e} (tol 1e-12)"
    run_criterion(criterion, 2, body)


# 3 -------------------------------------------------------------------------

def _oracle(a: int, b: int):
    """Count by walking the nine bits, then apply the definitions."""
    tp = fp = fn = 0
    for i in range(9):
        p, g = (a >> i) & 1, (b >> i) & 1
        tp += p & g
        fp += p & (1 - g)
        fn += (1 - p) & g
    empty = tp + fp + fn == 0

    def ratio(num, den, both_empty):
        return num / den if den else (1.0 if both_empty else 0.0)

    return (ratio(2 * tp, 2 * tp + fp + fn, empty), ratio(tp, tp + fp + fn, empty),
            ratio(tp, tp + fp, empty), ratio(tp, tp + fn, empty), tp + fp + fn > 0)


def test_criterion_03_metric_oracle(criterion):
    def body():
        t0 = time.perf_counter()
        masks = ((np.arange(512)[:, None] >> np.arange(9)) & 1).astype(bool).reshape(512, 3, 3)
        oracle = {}
        mismatches = identity_fail = checked_identity = 0
        for a, b in itertools.product(range(512), repeat=2):
            r = metrics(confusion(masks[a], masks[b]))
            key = (bin(a & b).count("1"), bin(a & ~b & 511).count("1"), bin(~a & b & 511).count("1"))
            exp = oracle.get(key)
            if exp is None:
                exp = oracle[key] = _oracle(a, b)
            if (r.dsc, r.iou, r.precision, r.recall) != exp[:4]:
                mismatches += 1
            if exp[4]:
                checked_identity += 1
                if abs(r.dsc - 2 * r.iou / (1 + r.iou)) > 1e-12:
                    identity_fail += 1
        secs = time.perf_counter() - t0
        ok = mismatches == 0 and identity_fail == 0 and secs < 10
        return ok, (f"262144 pairs, {mismatches} mismatches, DSC=2IoU/(1+IoU) violated on "
                    f"{identity_fail}/{checked_identity} defined pairs, {secs:.1f}s")
    run_criterion(criterion, 3, body)


def test_metric_oracle_counts_by_enumeration():
    # the memoised oracle keys on popcounts; make sure that matches walking the bits
    for a, b in [(0, 0), (511, 0), (0b101010101, 0b110011001), (7, 448)]:
        key = (bin(a & b).count("1"), bin(a & ~b & 511).count("1"), bin(~a & b & 511).count("1"))
        tp, fp, fn = key
        d, i, *_ = _oracle(a, b)
        if tp + fp + fn:
            assert d == 2 * tp / (2 * tp + fp + fn) and i == tp / (tp + fp + fn)


# 4 -------------------------------------------------------------------------

def test_criterion_04_loss_algebra(criterion):
    def body():
        g = np.zeros((1, 1, 8, 8))
        g[0, 0, 2:6, 1:7] = 1.0
        perfect = combined_loss(Tensor(g), Tensor(g)).item()
        half = combined_loss(Tensor(np.array([1.0, 1, 0, 0]).reshape(1, 1, 1, 4)),
                             Tensor(np.array([1.0, 0, 1, 0]).reshape(1, 1, 1, 4))).item()
        rng = np.random.default_rng(4)
        violations = 0
        for _ in range(10_000):
            shape = (1, 1, int(rng.integers(1, 9)), int(rng.integers(1, 9)))
            p = Tensor(rng.random(shape))
            m = Tensor((rng.random(shape) < rng.random()).astype(float))
            if soft_jaccard(p, m).item() > soft_dice(p, m).item():
                violations += 1
        ok = perfect <= 1e-5 and abs(half - 0.5833) <= 1e-4 and violations == 0
        return ok, (f"perfect {perfect:.2e} (<=1e-5), half-overlap {half:.5f} (0.5833+-1e-4), "
                    f"J>D in {violations}/10000")
    run_criterion(criterion, 4, body)


# 5 -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def overfit_pair():
    runs = []
    for _ in range(2):
        t0 = time.perf_counter()
        res = overfit_run(seed=0, n_slices=8, size=64, epochs=300, lr=1e-3)
        runs.append((res, time.perf_counter() - t0))
    return runs


def test_criterion_05_overfit(criterion, overfit_pair):
    def body():
        (a, ta), (b, tb) = overfit_pair
        identical = a.history == b.history and a.digest == b.digest
        final = a.history[-1]["val_soft_dsc"]
        ok = a.reached_epoch > 0 and final >= 0.95 and max(ta, tb) < 600 and identical
        return ok, (f"soft-DSC {final:.4f} at epoch {a.reached_epoch or 'never'} (<=300), "
                    f"{ta:.0f}s/{tb:.0f}s (<600s), bit-identical runs: {identical}")
    run_criterion(criterion, 5, body)


def test_overfit_loss_non_increasing_over_50_epochs(overfit_pair):
    losses = [h["train_loss"] for h in overfit_pair[0][0].history]
    for i in range(len(losses) - 50):
        assert losses[i + 50] <= losses[i]


# 6 -------------------------------------------------------------------------

def test_criterion_06_multimodality_direction(criterion):
    def body():
        budget = ModalityBudget()
        wins, scores = 0, []
        for seed in range(5):
            res = modality_run(seed, ("dwi", "dwi_adc"), budget)
            d, da = res["dwi"]["pooled"].dsc, res["dwi_adc"]["pooled"].dsc
            scores.append(f"{d:.3f}<{da:.3f}" if da > d else f"{d:.3f}>={da:.3f}")
            wins += da > d
        return wins >= 4, (f"dwi_adc beats dwi on test DSC in {wins}/5 seeds (need 4); "
                           f"dwi vs dwi_adc: {', '.join(scores)}")
    run_criterion(criterion, 6, body)


# 7 -------------------------------------------------------------------------

def test_criterion_07_nifti(criterion, tmp_path):
    def body():
        stats = {"round_trip": 0, "swapped": 0}

        @settings(max_examples=1000, deadline=None, derandomize=True,
                  suppress_health_check=list(HealthCheck))
        @given(headers())
        def prop(h):
            raw = write_header(h)
            assert write_header(parse_header(raw)) == raw
            stats["round_trip"] += 1
            assert parse_header(write_header(h, ">")) == parse_header(write_header(h, "<"))
            stats["swapped"] += 1

        prop()
        try:
            parse_header(handmade_header(magic=b"xyz\x00"))
            magic_ok = False
        except NiftiFormatError:
            magic_ok = True
        path = tmp_path / "v.nii"
        vals = np.random.default_rng(7).standard_normal(6 * 5 * 4).astype(np.float32)
        write_volume(path, Volume((6, 5, 4), (1.0, 1.0, 2.5), vals), "f4")
        exact = np.array_equal(read_volume(path).voxels, vals.astype(np.float64))
        path.write_bytes(path.read_bytes()[:-3])
        try:
            read_volume(path)
            trunc_ok = False
        except TruncatedDataError:
            trunc_ok = True
        ok = stats["round_trip"] >= 1000 and magic_ok and trunc_ok and exact
        return ok, (f"{stats['round_trip']} headers byte-exact, {stats['swapped']} byte-swapped "
                    f"equal, wrong magic rejected: {magic_ok}, truncation rejected: {trunc_ok}, "
                    f"float32 volume exact: {exact}")
    run_criterion(criterion, 7, body)


# 8 -------------------------------------------------------------------------

def test_criterion_08_splits(criterion):
    def body():
        seen = {"n": 0, "bad": 0}

        @settings(max_examples=1000, deadline=None, derandomize=True,
                  suppress_health_check=list(HealthCheck))
        @given(st.integers(3, 500), st.integers(0, 2 ** 64 - 1))
        def prop(n, seed):
            ids = [f"p{i:04d}" for i in range(n)]
            p = patient_split(ids, seed=seed)
            tr, va, te = set(p.train), set(p.val), set(p.test)
            sizes = (len(p.train), len(p.val), len(p.test))
            ideal = (0.7 * n, 0.1 * n, 0.2 * n)
            good = (not (tr & va or tr & te or va & te) and tr | va | te == set(ids)
                    and all(abs(s - i) <= 1 for s, i in zip(sizes, ideal)))
            f = kfold(ids, 5, seed) if n >= 5 else None
            if f is not None:
                flat = [x for fold in f.folds for x in fold]
                good &= sorted(flat) == sorted(ids) and len(flat) == n
            seen["n"] += 1
            seen["bad"] += not good
            assert good

        prop()
        p250 = patient_split([f"p{i}" for i in range(250)], seed=0)
        sizes = (len(p250.train), len(p250.val), len(p250.test))
        ok = seen["n"] >= 1000 and seen["bad"] == 0 and sizes == (175, 25, 50)
        return ok, (f"{seen['n']} random patient sets, {seen['bad']} failures; "
                    f"250 patients -> {sizes[0]}/{sizes[1]}/{sizes[2]}")
    run_criterion(criterion, 8, body)


# 9 -------------------------------------------------------------------------

def test_criterion_09_clahe(criterion):
    def body():
        rng = np.random.default_rng(9)
        img = rng.random((48, 40))
        out = clahe(img)
        det = np.array_equal(out, clahe(img.copy()))
        in_range = out.min() >= 0.0 and out.max() <= 1.0
        shape = out.shape == img.shape
        ramp = np.tile(np.linspace(0.45, 0.55, 64), (64, 1))
        before, after = rms_contrast(ramp), rms_contrast(clahe(ramp))
        ref_err = float(np.abs(clahe(ramp) - clahe_reference(ramp)).max())
        ok = det and in_range and shape and after > before and ref_err <= 1e-12
        return ok, (f"deterministic {det}, range [0,1] {in_range}, shape kept {shape}, "
                    f"ramp RMS {before:.4f} -> {after:.4f}, |fast - reference| {ref_err:.1e}")
    run_criterion(criterion, 9, body)


# 10 ------------------------------------------------------------------------

def test_criterion_10_checkpoint(criterion, tmp_path):
    def body():
        cfg = ModelConfig.preset("tiny", in_channels=3)
        store = init_params(cfg, 10)
        opt = AdamState(step=3, m={k: np.full(t.shape, 0.1) for k, t in store.params.items()},
                        v={k: np.full(t.shape, 0.2) for k, t in store.params.items()})
        ck = capture(cfg, store, opt, TrainState(epoch=2, step=9), np.random.default_rng(1))
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, ck)
        save_checkpoint(b, load_checkpoint(a, cfg.digest()))
        identical = a.read_bytes() == b.read_bytes()
        buf = a.read_bytes()
        errors = {}
        for label, fn, exc in [
            ("digest", lambda: decode(buf, ModelConfig.preset("tiny", in_channels=1).digest()),
             DigestMismatchError),
            ("magic", lambda: decode(b"XXXXXXXX" + buf[8:]), WrongMagicError),
            ("truncation", lambda: decode(buf[:len(buf) // 2]), CheckpointTruncatedError),
        ]:
            try:
                fn()
                errors[label] = "no error"
            except exc:
                errors[label] = exc.__name__
            except Exception as other:  # wrong kind of error
                errors[label] = f"wrong {type(other).__name__}"
        distinct = len(set(errors.values())) == 3 and all(v.endswith("Error") and
                                                          not v.startswith("wrong")
                                                          for v in errors.values())
        return identical and distinct, (f"save->load->save byte-identical: {identical}; "
                                        + ", ".join(f"{k} -> {v}" for k, v in errors.items()))
    run_criterion(criterion, 10, body)
