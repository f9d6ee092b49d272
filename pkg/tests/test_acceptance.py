"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N [PASS|FAIL]`` line (also collected
in the terminal summary).  Criteria 6 and 7 share one cross-validation run
and take roughly a quarter of an hour on a single core.

Run just this file with ``pytest tests/test_acceptance.py -s`` or
``python tests/test_acceptance.py``.
"""
import json
import math
import time

import numpy as np
import pytest

from evanet import tensor as T
from evanet.anomaly import score_cohorts
from evanet.checkpoint import load_checkpoint, save_checkpoint
from evanet.data import (EpochSet, SynthConfig, read_epoch_samples, synth_cohort, write_cohort,
                         write_epoch)
from evanet.encoder import (EncoderConfig, attention_benchmark, encoder_forward, full_attention,
                            probsparse_attention, top_u)
from evanet.model import ModelConfig, forward_train, init_params
from evanet.tensor import Tensor
from evanet.prototype import align_loss, embed_age, prototype_forward
from evanet.training import (TrainConfig, cosine_lr, early_stop, kfold_split, regression_metrics,
                             run_cv, train_model)
from evanet.vib import kl_loss, reparameterize, vib_heads
from conftest import tiny_model_config
from oracles import mc_kl, op_grad_error, param_grad_error

SEEDS = range(10)

# reduced model and protocol for the synthetic regression run
DESK_MODEL = ModelConfig(encoder=EncoderConfig(n_layers=2, d_model=64, n_heads=8, d_ff=64))
DESK_TRAIN = TrainConfig(max_epochs=40, batch_size=16, lr=3e-3, k_folds=5, patience=20,
                         epochs_per_pass=96, val_epochs_per_subject=2, seed=0)
COHORT = SynthConfig(n_subjects=200, epochs_per_subject=30, seed=11, id_prefix="cv")


# -- 1 -------------------------------------------------------------------------------
def off_kink(a):
    return np.where(np.abs(a) < 0.05, 0.5, a)


def kink_clear_ages(g, params, n=2, margin=1e-3):
    """Age embeddings whose hidden relu inputs in the prototype network all
    sit at least ``margin`` from zero, so central differences never straddle
    a kink."""
    while True:
        e = embed_age(g.uniform(10, 90, n), 64)
        h, pre = e, []
        for i in range(2):
            h = h @ params[f"proto.{i}.weight"].data + params[f"proto.{i}.bias"].data
            pre.append(h)
            h = np.maximum(h, 0.0)
        if min(np.min(np.abs(a)) for a in pre) > margin:
            return e


def _ops(g):
    """(name, fn, inputs) triples with inputs drawn from ``g``."""
    r = g.standard_normal
    lv_params = init_params(tiny_model_config(), int(g.integers(1 << 30)))
    eps_seed = int(g.integers(1 << 30))
    return [
        ("matmul", T.matmul, [r((3, 5)), r((5, 2))]),
        ("batched_matmul", T.matmul, [r((2, 3, 4)), r((2, 4, 3))]),
        ("add", T.add, [r((3, 4)), r(4)]),
        ("sub", T.sub, [r((3, 4)), r((3, 4))]),
        ("mul", T.mul, [r((3, 4)), r(())]),
        ("scale", lambda x: T.scale(x, 1.7), [r((3, 4))]),
        ("exp", T.exp, [r((3, 4))]),
        ("log", T.log, [np.abs(r((3, 4))) + 0.3]),
        ("sqrt", T.sqrt, [np.abs(r((3, 4))) + 0.3]),
        ("square", T.square, [r((3, 4))]),
        ("relu", T.relu, [off_kink(r((3, 4)))]),
        ("clamp", lambda x: T.clamp(x, -10, 10), [r((3, 4)) * 4]),
        ("sum", lambda x: T.tsum(x, axis=0), [r((3, 4))]),
        ("mean", lambda x: T.mean(x, axis=-1, keepdims=True), [r((3, 4))]),
        ("reshape_transpose", lambda x: T.transpose(T.reshape(x, (4, 3)), (1, 0)), [r((3, 4))]),
        ("softmax", T.softmax, [r((3, 5))]),
        ("layer_norm", T.layer_norm, [r((3, 6)), r(6), r(6)]),
        ("linear", T.linear, [r((2, 3, 4)), r((4, 5)), r(5)]),
        ("full_attention", full_attention, [r((2, 6, 3)), r((2, 6, 3)), r((2, 6, 3))]),
        ("probsparse_attention", lambda q, k, v: probsparse_attention(q, k, v, 3),
         [r((2, 8, 3)), r((2, 8, 3)), r((2, 8, 3))]),
        ("vib_heads", lambda h: T.add(*vib_heads(h, lv_params)), [r((2, 16))]),
        ("reparameterize", lambda m, lv: reparameterize(m, lv, T.make_rng(eps_seed)),
         [r((2, 4)), r((2, 4))]),
        ("kl_loss", kl_loss, [r((2, 4)), r((2, 4))]),
        ("prototype", lambda e: prototype_forward(e, lv_params), [kink_clear_ages(g, lv_params)]),
        ("align_loss", align_loss, [r((3, 8)), r((3, 8))]),
    ]


def test_criterion_1_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    worst_op, worst_name = 0.0, ""
    for seed in SEEDS:
        for name, fn, inputs in _ops(np.random.default_rng(seed)):
            e = op_grad_error(fn, inputs, seed=seed)
            if e > worst_op:
                worst_op, worst_name = e, name
    cfg = tiny_model_config()
    worst_e2e = 0.0
    for seed in SEEDS:
        g = np.random.default_rng(100 + seed)
        x, y = g.standard_normal((2, 19, 32)) * 2e-5, g.uniform(15, 80, 2)
        errs = param_grad_error(lambda p: forward_train(x, y, p, cfg, T.make_rng(seed)).total,
                                init_params(cfg, seed), n_entries=12, seed=seed)
        worst_e2e = max(worst_e2e, max(errs.values()))
    secs = time.perf_counter() - t0
    ok = worst_op < 1e-4 and worst_e2e < 1e-3 and secs < 60
    assert verdict(1, "gradient fidelity", ok,
                   f"worst per-op {worst_op:.2e} ({worst_name}), end-to-end {worst_e2e:.2e}, "
                   f"{len(SEEDS)} seeds, {secs:.1f}s")


# -- 2 -------------------------------------------------------------------------------
def test_criterion_2_attention_equivalence(verdict):
    t0 = time.perf_counter()
    worst_attn = 0.0
    for t in (8, 64, 256):
        g = np.random.default_rng(t)
        q, k, v = (Tensor(g.standard_normal((2, t, 8))) for _ in range(3))
        a = probsparse_attention(q, k, v, t, sampled=False).data
        b = full_attention(q, k, v).data
        worst_attn = max(worst_attn, float(np.max(np.abs(a - b))))
    worst_enc = 0.0
    for t in (8, 64, 256):
        base = dict(n_layers=4, d_model=32, n_heads=4, seq_len=t, n_top=t)
        full = EncoderConfig(attention_mode="exact_full", **base)
        sparse = EncoderConfig(attention_mode="probsparse_exact_measure", **base)
        params = init_params(ModelConfig(encoder=full, d_latent=8), 7)
        x = np.random.default_rng(t + 1).standard_normal((2, 19, t)) * 2e-5
        with T.no_grad():
            h1 = encoder_forward(x, params, full, T.make_rng(0)).data
            h2 = encoder_forward(x, params, sparse, T.make_rng(0)).data
        worst_enc = max(worst_enc, float(np.max(np.abs(h1 - h2))))
    secs = time.perf_counter() - t0
    ok = worst_attn < 1e-9 and worst_enc < 1e-7 and secs < 60
    assert verdict(2, "attention equivalence", ok,
                   f"max |attn diff| {worst_attn:.1e}, 4-layer max |dH| {worst_enc:.1e}, {secs:.1f}s")


# -- 3 -------------------------------------------------------------------------------
def test_criterion_3_complexity(verdict):
    t0 = time.perf_counter()
    lengths = [500, 1000, 2000, 4000]
    rows = attention_benchmark(lengths, ("exact_full", "probsparse_sampled_measure"),
                               d_model=64, n_heads=8, c=5.0, seed=0)
    macs = {m: [r.mac_count for r in rows if r.mode == m] for m in ("exact_full", "probsparse_sampled_measure")}
    u1000 = next(r.u for r in rows if r.mode == "probsparse_sampled_measure" and r.seq_len == 1000)
    sparse_growth = [b / a for a, b in zip(macs["probsparse_sampled_measure"],
                                           macs["probsparse_sampled_measure"][1:])]
    full_growth = [b / a for a, b in zip(macs["exact_full"], macs["exact_full"][1:])]
    secs = time.perf_counter() - t0
    ok = (max(sparse_growth) < 2.6 and all(abs(f - 4.0) < 0.05 for f in full_growth)
          and u1000 == math.ceil(5 * math.log(1000)) == 35 and top_u(1000, 5.0) == 35 and secs < 120)
    assert verdict(3, "complexity", ok,
                   f"sampled growth {', '.join(f'{x:.2f}' for x in sparse_growth)}; "
                   f"full growth {', '.join(f'{x:.2f}' for x in full_growth)}; u(1000)={u1000}; {secs:.1f}s")


# -- 4 -------------------------------------------------------------------------------
def test_criterion_4_kl_closed_form(verdict):
    t0 = time.perf_counter()
    g = np.random.default_rng(4)
    worst = 0.0
    for i in range(20):
        mu, lv = g.normal(0, 1, 8), g.uniform(-2, 2, 8)
        closed = kl_loss(Tensor(mu), Tensor(lv)).item()
        worst = max(worst, abs(mc_kl(mu, lv, 1_000_000, i) - closed) / closed)
    zero = kl_loss(Tensor(np.zeros(8)), Tensor(np.zeros(8))).item()
    secs = time.perf_counter() - t0
    ok = worst < 0.02 and zero == 0.0 and secs < 60
    assert verdict(4, "VIB closed form", ok,
                   f"worst relative MC gap {worst:.2%} over 20 pairs, KL(0,0)={zero!r}, {secs:.1f}s")


# -- 5 -------------------------------------------------------------------------------
def test_criterion_5_loss_composition(verdict):
    identity = []
    for seed in SEEDS:
        cfg = tiny_model_config(beta=0.0, gamma=0.0)
        g = np.random.default_rng(seed)
        out = forward_train(g.standard_normal((3, 19, 32)) * 2e-5, g.uniform(15, 80, 3),
                            init_params(cfg, seed), cfg, T.make_rng(seed))
        identity.append(out.l_total == out.l_pred)

    data = synth_cohort(SynthConfig(n_subjects=6, epochs_per_subject=2, seed=5))
    enc = EncoderConfig(n_layers=1, d_model=16, n_heads=2, d_ff=16)
    variants = {
        "full": ModelConfig(encoder=enc, d_latent=8),
        "w/o V": ModelConfig(encoder=enc, d_latent=8, no_vib=True, beta=0.0),
        "w/o A": ModelConfig(encoder=enc, d_latent=8, no_align=True, gamma=0.0),
        "w/o V+A": ModelConfig(encoder=enc, d_latent=8, no_vib=True, beta=0.0,
                               no_align=True, gamma=0.0),
    }
    tc = TrainConfig(max_epochs=3, batch_size=4, lr=1e-3)
    structure = {}
    for name, cfg in variants.items():
        init = init_params(cfg, 0)
        params, hist, _, _, stopped = train_model(data, None, cfg, tc, seed=0)
        has_proto = any(k.startswith("proto.") for k in params)
        logvar_frozen = all(np.array_equal(params[k].data, init[k].data)
                            for k in params if k.startswith("vib.logvar."))
        finite = all(math.isfinite(h["l_total"]) for h in hist) and stopped == 3
        no_ib = all(h["l_ib"] == 0.0 for h in hist)
        no_align = all(h["l_align"] == 0.0 for h in hist)
        structure[name] = finite and has_proto == (not cfg.no_align) and no_align == cfg.no_align \
            and no_ib == cfg.no_vib and logvar_frozen == cfg.no_vib
    ok = all(identity) and all(structure.values())
    assert verdict(5, "loss composition", ok,
                   f"beta=gamma=0 identity {sum(identity)}/{len(identity)} exact; "
                   + ", ".join(f"{k} {'ok' if v else 'BAD'}" for k, v in structure.items()))


# -- 6 and 7 -------------------------------------------------------------------------
@pytest.fixture(scope="module")
def cv_run(tmp_path_factory):
    data = synth_cohort(COHORT)
    t0 = time.perf_counter()
    res = run_cv(data, DESK_MODEL, DESK_TRAIN, tmp_path_factory.mktemp("cv"), keep_params=True)
    return data, res, time.perf_counter() - t0


def _baseline_mae(data, res) -> float:
    """Per fold, predict the mean training-subject age for every test subject."""
    ages = data.subject_ages()
    maes = []
    for fold, (train_ids, test_ids) in enumerate(kfold_split(data.subjects, DESK_TRAIN.k_folds,
                                                             DESK_TRAIN.seed)):
        const = np.mean([ages[s] for s in train_ids])
        maes.append(np.mean([abs(ages[s] - const) for s in test_ids]))
        assert sorted(s for f, s, _, _ in res.predictions if f == fold) == sorted(test_ids)
    return float(np.mean(maes))


@pytest.mark.slow
def test_criterion_6_synthetic_regression(verdict, cv_run):
    data, res, secs = cv_run
    s = res.summary()
    mae, r2 = s["test_mae"][0], s["test_r2"][0]
    base = _baseline_mae(data, res)
    ok = mae <= 0.6 * base and r2 > 0.5 and secs < 30 * 60
    assert verdict(6, "synthetic regression", ok,
                   f"subject MAE {mae:.3f} +- {s['test_mae'][1]:.3f} vs baseline {base:.3f} "
                   f"({1 - mae / base:.0%} lower), R2 {r2:.3f} +- {s['test_r2'][1]:.3f}, "
                   f"{secs / 60:.1f} min")


@pytest.mark.slow
def test_criterion_7_anomaly_ordering(verdict, cv_run):
    _, res, _ = cv_run
    t0 = time.perf_counter()
    cohorts = [synth_cohort(SynthConfig(n_subjects=25, epochs_per_subject=30, seed=777 + i,
                                        pathology_severity=sev, id_prefix=prefix))
               for i, (sev, prefix) in enumerate([(0.0, "hc"), (0.5, "mci"), (1.0, "ad")])]
    patho = EpochSet.concat(cohorts[1:])
    report = score_cohorts(res.params[0], cohorts[0], patho, DESK_MODEL)
    secs = time.perf_counter() - t0
    tests = {(t.a, t.b): t for t in report.tests}
    ps = [tests[("healthy", lab)].bag.p for lab in ("mci", "ad")] + \
         [tests[("healthy", lab)].pae.p for lab in ("mci", "ad")]
    c = report.cohorts
    ok = bool(report.bag_ordered and report.pae_ordered and max(ps) < 0.01 and secs < 300)
    assert verdict(7, "anomaly ordering", ok,
                   "BAG " + " < ".join(f"{c[k].bag_mean:.2f}" for k in ("healthy", "mci", "ad"))
                   + "; PAE " + " < ".join(f"{c[k].pae_mean:.3f}" for k in ("healthy", "mci", "ad"))
                   + f"; max healthy-vs-pathological p {max(ps):.1e}; {secs:.0f}s")


# -- 8 -------------------------------------------------------------------------------
def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_determinism(verdict, tmp_path):
    checks = {}
    cfg = SynthConfig(n_subjects=5, epochs_per_subject=3, seed=21)
    write_cohort(synth_cohort(cfg), tmp_path / "a")
    write_cohort(synth_cohort(cfg), tmp_path / "b")
    checks["cohort files"] = _tree(tmp_path / "a") == _tree(tmp_path / "b")

    ids = [f"s{i:03d}" for i in range(57)]
    checks["fold splits"] = kfold_split(ids, 5, seed=3) == kfold_split(ids, 5, seed=3)

    data = synth_cohort(cfg)
    mcfg = ModelConfig(encoder=EncoderConfig(n_layers=1, d_model=16, n_heads=2, d_ff=16), d_latent=8)
    tc = TrainConfig(max_epochs=3, batch_size=4, lr=1e-3)
    runs = [train_model(data.take(range(9)), data.take(range(9, 15)), mcfg, tc, seed=4)
            for _ in range(2)]
    checks["loss curves"] = (json.dumps(runs[0][1:3]) == json.dumps(runs[1][1:3])
                             and all(np.array_equal(runs[0][0][k].data, runs[1][0][k].data)
                                     for k in runs[0][0]))

    patho = synth_cohort(SynthConfig(n_subjects=3, epochs_per_subject=2, seed=22,
                                     pathology_severity=1.0, id_prefix="p"))
    reports = []
    for d in ("r1", "r2"):
        score_cohorts(runs[0][0], data, patho, mcfg).write(tmp_path / d, violin=True)
        reports.append(_tree(tmp_path / d))
    checks["anomaly reports"] = reports[0] == reports[1]

    save_checkpoint(runs[0][0], tmp_path / "m.evaw")
    back = load_checkpoint(tmp_path / "m.evaw")
    checks["checkpoint"] = (list(back) == list(runs[0][0]) and
                            all(back[k].tobytes() == runs[0][0][k].data.tobytes() for k in back))

    x = (np.random.default_rng(8).standard_normal((19, 1000)) * 3e-5).astype(np.float32)
    write_epoch(x, tmp_path / "e.bin")
    back = read_epoch_samples(tmp_path / "e.bin")
    write_epoch(back, tmp_path / "e2.bin")
    checks["epoch file"] = (back.astype(np.float32).tobytes() == x.tobytes()
                            and (tmp_path / "e.bin").read_bytes() == (tmp_path / "e2.bin").read_bytes())
    ok = all(checks.values())
    assert verdict(8, "determinism and round-trips", ok,
                   ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in checks.items()))


# -- 9 -------------------------------------------------------------------------------
@pytest.mark.slow
def test_criterion_9_harness_contracts(verdict, cv_run):
    checks = {}
    checks["cosine"] = (cosine_lr(0, 200, 1e-4) == 1e-4 and abs(cosine_lr(200, 200, 1e-4)) < 1e-20
                        and abs(cosine_lr(100, 200, 1e-4) - 5e-5) < 1e-18)
    checks["early stop"] = (not early_stop([1.0] * 20, 20) and early_stop([1.0] * 21, 20)
                            and not early_stop([2.0] + [1.0] * 20, 20)
                            and early_stop([2.0] + [1.0] * 21, 20))

    _, res, _ = cv_run
    rmse_ok = all(f.test_rmse >= f.test_mae and f.epoch_rmse >= f.epoch_mae for f in res.folds)
    g = np.random.default_rng(9)
    for _ in range(1000):
        n = int(g.integers(1, 50))
        mae, rmse, _ = regression_metrics(g.normal(50, 20, n), g.normal(50, 20, n))
        rmse_ok &= rmse >= mae
    checks["rmse >= mae"] = bool(rmse_ok)

    disjoint = True
    for _ in range(1000):
        n = int(g.integers(2, 120))
        subjects = [f"sub{int(i)}" for i in g.choice(10 * n, size=n, replace=False)]
        rows = list(np.repeat(subjects, g.integers(1, 4, size=n)))  # several epochs per subject
        g.shuffle(rows)
        k = int(g.integers(2, min(n, 12) + 1))
        splits = kfold_split(rows, k, seed=int(g.integers(1 << 31)))
        tests = [set(te) for _, te in splits]
        disjoint &= (len(splits) == k and set().union(*tests) == set(subjects)
                     and sum(map(len, tests)) == n
                     and all(not set(tr) & set(te) and set(tr) | set(te) == set(subjects)
                             for tr, te in splits))
    checks["k-fold disjointness"] = bool(disjoint)
    ok = all(checks.values())
    assert verdict(9, "harness contracts", ok,
                   ", ".join(f"{k} {'ok' if v else 'BAD'}" for k, v in checks.items()))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-s", "-q"]))
