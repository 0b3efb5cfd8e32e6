"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Lines are also collected and repeated in the terminal summary.
"""

import math
import time

import numpy as np
import pytest
import torch
from scipy.stats import norm, qmc

from conftest import ACCEPTANCE_LINES
from dwpseg import data, kernel_bank
from dwpseg.architectures import (
    FIRST_BLOCK,
    LAST_BLOCK,
    NetworkSpec,
    UNet3D,
    VARIATIONAL,
    build_unet,
    count_parameters,
    load_checkpoint,
    resolution_groups,
    save_checkpoint,
)
from dwpseg.dwp import VAEHyperparams, kl_approx, load_bundle, reconstruct, save_bundle, train_vae
from dwpseg.errors import FormatError, VersionError
from dwpseg.experiments import (
    ExperimentConfig,
    PlateauState,
    TrainHyperparams,
    build_prior_bundle,
    plateau_step,
    run_protocol,
    train_source_networks,
)
from dwpseg.kernel_bank import collect, merge, normalize
from dwpseg.metrics import dsc, iou
from dwpseg.variational import GaussianPosterior, GaussianPrior, entropy, gaussian_kl, log_q

# toy benchmark used by criteria 8 and 11
SOURCE_N = 40
TARGET_N = 40
TRAIN_SIZE = 4
TEST_SIZE = 20
N_SPLITS = 3
SOURCE_DATA_SEED = 3
SOURCE_TRAIN_SEED = 11
VAE_SEED = 5
TARGET_DATA_SEED = 7
PROTOCOL_SEED = 0
SOURCE_NETS = 2
SOURCE_CYCLES = 1
SOURCE_EPOCHS = 30
TARGET_EPOCHS = 150
VAE_EPOCHS = 60
KL_WEIGHT = 1.0 / (32 * 32 * 32)


def report(n, name, ok, detail):
    line = f"ACCEPTANCE {n}: {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


@pytest.fixture(scope="session")
def benchmark():
    """Source networks, kernel prior and target data for the toy two-domain benchmark."""
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    source = [data.preprocess(v) for v in data.generate("ms-like", SOURCE_N, seed=SOURCE_DATA_SEED)]
    target = [data.preprocess(v) for v in data.generate("tumor-like", TARGET_N, seed=TARGET_DATA_SEED)]
    hp = TrainHyperparams(max_epochs=SOURCE_EPOCHS)
    snaps = train_source_networks(source, SOURCE_NETS, SOURCE_CYCLES, hp, NetworkSpec.toy(), seed=SOURCE_TRAIN_SEED)
    bundle, bank = build_prior_bundle(
        [(s.checkpoint_id, s.net) for s in snaps], VAEHyperparams(max_epochs=VAE_EPOCHS, max_kernels=4000), seed=VAE_SEED
    )
    return {"target": target, "snaps": snaps, "bundle": bundle, "bank": bank, "setup_s": time.perf_counter() - t0}


def target_cfg(method, bench, **kw):
    base = dict(
        train_sizes=[TRAIN_SIZE], test_size=TEST_SIZE, n_splits=N_SPLITS, seed=PROTOCOL_SEED,
        hp=TrainHyperparams(max_epochs=TARGET_EPOCHS), network=NetworkSpec.toy(),
        source_checkpoint=bench["snaps"][-1].net, prior=bench["bundle"], kl_weight=KL_WEIGHT,
    )
    base.update(kw)
    return ExperimentConfig(method, **base)


# 1 ---------------------------------------------------------------------------


def test_criterion_01_parameter_count():
    t = time.perf_counter()
    n = count_parameters(UNet3D(NetworkSpec.full()))
    dt = time.perf_counter() - t
    ok = n == 726480 and dt < 5
    assert report(1, "full-width U-Net parameter count", ok, f"count={n}, expected 726480, {dt:.2f}s")


# 2 ---------------------------------------------------------------------------


def test_criterion_02_shape_trace():
    t = time.perf_counter()
    shape = (152, 184, 144)
    x = torch.zeros(1, 1, *shape)
    with torch.no_grad():
        toy = build_unet(NetworkSpec.toy(), torch.Generator().manual_seed(0)).features(x)
        full = build_unet(NetworkSpec.full(), torch.Generator().manual_seed(0)).features(x)
    dt = time.perf_counter() - t
    got = [tuple(f["down6"].shape[2:]) for f in (toy, full)] + [tuple(f["out"].shape[2:]) for f in (toy, full)]
    ok = got == [(19, 23, 18)] * 2 + [shape] * 2 and dt < 60 and full["out"].shape[1] == 2
    assert report(2, "bottleneck and output shapes", ok, f"bottleneck={got[1]}, output={got[3]}, {dt:.1f}s")


# 3 ---------------------------------------------------------------------------


def test_criterion_03_dsc_iou_identity():
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 12, size=3))
        a = rng.random(shape) < rng.random()
        b = rng.random(shape) < rng.random()
        j = iou(a, b)
        worst = max(worst, abs(dsc(a, b) - 2 * j / (1 + j)))
    dt = time.perf_counter() - t
    ok = worst <= 1e-12 and dt < 5
    assert report(3, "DSC = 2 IoU / (1 + IoU)", ok, f"max abs error={worst:.2e} over 1000 pairs, {dt:.2f}s")


# 4 ---------------------------------------------------------------------------


def test_criterion_04_gaussian_oracles():
    t = time.perf_counter()
    half_log_2pi = 0.5 * math.log(2 * math.pi)
    shape = (1, 1, 3, 3, 3)
    unit = GaussianPosterior.from_tensors(torch.zeros(shape, dtype=torch.float64), torch.zeros(shape, dtype=torch.float64))
    unit.requires_grad_(False)
    shifted = GaussianPosterior.from_tensors(torch.ones(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
    shifted.requires_grad_(False)
    checks = {
        "entropy d=27": (float(entropy(unit)), 27 * (0.5 + half_log_2pi), 38.311340),
        "log q at mode d=27": (float(log_q(unit, unit.mu)), -27 * half_log_2pi, -24.811340),
        "KL(N(1,1)||N(0,1))": (float(gaussian_kl(shifted, GaussianPrior(0.0, 1.0))), 0.5, 0.5),
    }
    dt = time.perf_counter() - t
    errs = {k: max(abs(v - o), abs(v - p)) for k, (v, o, p) in checks.items()}
    ok = all(e < 1e-6 for e in errs.values()) and dt < 1
    detail = ", ".join(f"{k}={checks[k][0]:.6f}" for k in checks)
    assert report(4, "Gaussian entropy / log-density / KL", ok, f"{detail}, {dt:.3f}s")


# 5 ---------------------------------------------------------------------------

TRUE_KL = 0.5 * math.log(2.0) + 0.25 - 0.5  # KL(N(0,1) || N(0,2)), the q-vs-marginal divergence


class LinearGaussian:
    """p(z)=N(0,1), p(w|z)=N(z,1); encoder N(scale*w, var). Exact posterior: scale 1/2, var 1/2."""

    latent_dim = 1

    def __init__(self, scale=0.5, var=0.5):
        self.scale, self.var = scale, var

    def encode(self, w):
        w = w.reshape(w.shape[0], 1)
        return self.scale * w, torch.full_like(w, 0.5 * math.log(self.var))

    def decode(self, z):
        return z, torch.zeros_like(z)


def _gap(scale, var):
    # E_q KL(r(z|w) || p(z|w)) for q = N(0, 1)
    return 0.5 * (var / 0.5 + (scale - 0.5) ** 2 / 0.5 - 1 - math.log(var / 0.5))


def test_criterion_05_kl_approx_bound():
    t = time.perf_counter()
    n = 2**17  # >= 1e5 draws; power of two keeps the Sobol sequence balanced
    u = qmc.Sobol(2, scramble=True, seed=0).random(n)
    eps = torch.as_tensor(norm.ppf(u), dtype=torch.float64)
    zeros = torch.zeros(n, 1, dtype=torch.float64)
    exact = float(kl_approx(zeros, zeros, LinearGaussian(), eps[:, :1], eps[:, 1:]).mean())
    rel = abs(exact - TRUE_KL) / TRUE_KL

    rng = np.random.default_rng(1)
    g = torch.Generator().manual_seed(1)
    m = 100000
    margins = []
    for _ in range(10):
        log_ratio = rng.choice([-1, 1]) * rng.uniform(0.5, 1.0)
        enc = LinearGaussian(0.5 + rng.uniform(-0.3, 0.3), 0.5 * math.exp(log_ratio))
        w_eps = torch.randn(m, 1, generator=g, dtype=torch.float64)
        z_eps = torch.randn(m, 1, generator=g, dtype=torch.float64)
        v = kl_approx(torch.zeros(m, 1, dtype=torch.float64), torch.zeros(m, 1, dtype=torch.float64), enc, w_eps, z_eps)
        se = float(v.std()) / math.sqrt(m)
        margins.append((float(v.mean()) - TRUE_KL) / se)
    dt = time.perf_counter() - t
    ok = rel < 0.01 and min(margins) > 3 and dt < 60
    assert report(
        5, "KL^approx tightness and upper bound", ok,
        f"exact-encoder mean={exact:.7f} vs {TRUE_KL:.7f} (rel {rel:.2e}); mismatched encoders min z={min(margins):.1f}, {dt:.1f}s",
    )


# 6 ---------------------------------------------------------------------------


def test_criterion_06_gradients():
    from test_dwp import TwoLayer, fd_check, fixed_noise, toy_batch, two_layer_bundle

    from dwpseg.dwp import elbo_approx
    from dwpseg.metrics import combined_loss

    t = time.perf_counter()
    g = torch.Generator().manual_seed(4)
    probs = (0.05 + 0.9 * torch.rand(2, 4, 4, 4, generator=g, dtype=torch.float64)).requires_grad_(True)
    y = (torch.rand(2, 4, 4, 4, generator=g, dtype=torch.float64) > 0.5).double()
    err_loss = fd_check(lambda: combined_loss(probs, y), [probs], n_coords=30)

    net, bundle = TwoLayer(), two_layer_bundle()
    x, yb = toy_batch()
    noise = fixed_noise(net)
    params = [p for c in net.layers.values() for p in (c.posterior.mu, c.posterior.log_sigma)]
    params += list(bundle.encoder_parameters())
    err_elbo = fd_check(lambda: elbo_approx(net, bundle, x, yb, 10, noise=noise).objective, params, n_coords=4)
    dt = time.perf_counter() - t
    ok = err_loss < 1e-4 and err_elbo < 1e-4 and dt < 120
    assert report(6, "finite-difference gradients", ok, f"combined_loss rel err={err_loss:.1e}, elbo_approx rel err={err_elbo:.1e}, {dt:.1f}s")


# 7 ---------------------------------------------------------------------------

STREAMS = {
    "flat": ([1.0] * 60, (11, 22, 33), 33),
    "improve_then_flat": ([5.0, 4.0, 3.0, 2.0] + [1.0] * 60, (15, 26, 37), 37),
    "nan_after_first": ([1.0] + [math.nan] * 60, (11, 22, 33), 33),
    "late_improvement": ([1.0] * 9 + [0.5] * 60, (20, 31, 42), 42),
    "tiny_gains_below_delta": ([1.0 - 4e-5 * e for e in range(80)], (), None),
}


def test_criterion_07_scheduler_traces():
    t = time.perf_counter()
    bad = []
    for name, (stream, drops, stop_epoch) in STREAMS.items():
        state = PlateauState.start(1e-3, 10, 0.1, 1e-4, 1e-6)
        lrs, stopped, lr_hand = [], None, 1e-3
        expected = []
        for e, loss in enumerate(stream):
            state, lr, stop = plateau_step(state, loss)
            if e in drops:
                lr_hand *= 0.1
            lrs.append(lr)
            expected.append(lr_hand)
            if stop:
                stopped = e
                break
        if lrs != expected or stopped != stop_epoch:
            bad.append(name)
    dt = time.perf_counter() - t
    ok = not bad and dt < 1
    assert report(7, "plateau scheduler traces", ok, f"{len(STREAMS) - len(bad)}/{len(STREAMS)} streams exact, {dt:.3f}s")


# 8 ---------------------------------------------------------------------------


def test_criterion_08_frozen_parameters(benchmark):
    t = time.perf_counter()
    short = dict(n_splits=1, test_size=4, keep_models=True, hp=TrainHyperparams(max_epochs=20))
    source = benchmark["snaps"][-1].net
    prf = run_protocol(target_cfg("prf", benchmark, **short), benchmark["target"])
    net, _ = prf.models[(TRAIN_SIZE, 0)]
    frozen_ok, trained = True, False
    for lid, conv in net.layers.items():
        same = conv.weight.detach().numpy().tobytes() == source.layers[lid].weight.detach().numpy().tobytes()
        if lid.split(".")[0] in FIRST_BLOCK + LAST_BLOCK:
            trained |= not same
        else:
            frozen_ok &= same

    phi_before = [p.detach().numpy().tobytes() for p in benchmark["bundle"].decoder_parameters()]
    psi_before = [p.detach().numpy().tobytes() for p in benchmark["bundle"].encoder_parameters()]
    dwp = run_protocol(target_cfg("dwp", benchmark, **short), benchmark["target"])
    _, used = dwp.models[(TRAIN_SIZE, 0)]
    phi_after = [p.detach().numpy().tobytes() for p in used.decoder_parameters()]
    psi_after = [p.detach().numpy().tobytes() for p in used.encoder_parameters()]
    dt = time.perf_counter() - t
    phi_ok = phi_before == phi_after
    psi_moved = psi_before != psi_after
    ok = frozen_ok and trained and phi_ok and psi_moved and dt < 600
    assert report(
        8, "frozen parameters stay bit-identical", ok,
        f"PRf middle frozen={frozen_ok}, PRf outer trained={trained}, DWP decoders identical={phi_ok}, encoders updated={psi_moved}, {dt:.0f}s",
    )


# 9 ---------------------------------------------------------------------------


def _corrupt_checks(path, loader):
    raw = path.read_bytes()
    results = []
    for blob, err in ((b"ZZZZ" + raw[4:], VersionError), (raw[:4] + b"\x63\x00" + raw[6:], VersionError), (raw[:9], FormatError), (raw[: len(raw) - 3], FormatError)):
        path.write_bytes(blob)
        try:
            loader(path)
            results.append(False)
        except err:
            results.append(True)
        except Exception:
            results.append(False)
    path.write_bytes(raw)
    return all(results)


def test_criterion_09_serialization(tmp_path):
    t = time.perf_counter()
    ok = {}
    det = build_unet(NetworkSpec.toy(), torch.Generator().manual_seed(0))
    var = build_unet(NetworkSpec.toy(mode=VARIATIONAL), torch.Generator().manual_seed(1))
    for name, net in (("det", det), ("var", var)):
        p = tmp_path / f"{name}.dwpn"
        save_checkpoint(net, p)
        back = load_checkpoint(p)
        ok[f"checkpoint-{name}"] = all(
            a.detach().numpy().tobytes() == b.detach().numpy().tobytes() for a, b in zip(net.parameters(), back.parameters())
        ) and _corrupt_checks(p, load_checkpoint)

    bank = normalize(merge([collect(det, resolution_groups(det.spec), "a")]))
    p = tmp_path / "k.bank"
    kernel_bank.save(bank, p)
    back = kernel_bank.load(p)
    ok["bank"] = all(bank.groups[g].tobytes() == back.groups[g].tobytes() for g in bank.groups) and back.norm_constants == bank.norm_constants
    ok["bank"] &= _corrupt_checks(p, kernel_bank.load)

    from test_dwp import two_layer_bundle

    bundle = two_layer_bundle()
    p = tmp_path / "b.dwpb"
    save_bundle(bundle, p)
    back = load_bundle(p)
    ok["bundle"] = all(
        a.numpy().tobytes() == b.numpy().tobytes()
        for a, b in zip(bundle.vaes[1].state_dict().values(), back.vaes[1].state_dict().values())
    ) and back.group_map == bundle.group_map
    ok["bundle"] &= _corrupt_checks(p, load_bundle)

    vol = data.generate("ms-like", 1, seed=0)[0]
    p = tmp_path / "v.dwpv"
    data.save_volume(vol, p)
    back = data.load_volume(p)
    ok["volume"] = back.intensities.tobytes() == vol.intensities.tobytes() and back.mask.tobytes() == vol.mask.tobytes()
    ok["volume"] &= _corrupt_checks(p, data.load_volume)
    dt = time.perf_counter() - t
    passed = all(ok.values()) and dt < 10
    assert report(9, "serialization round trips and corrupt headers", passed, f"{ok}, {dt:.2f}s")


# 10 --------------------------------------------------------------------------


def structured_kernels(n, seed):
    """Smooth displaced Gaussian bumps with a signed amplitude: a 4-parameter kernel family."""
    g = np.random.default_rng(seed)
    grid = np.stack(np.meshgrid(*[np.arange(3) - 1.0] * 3, indexing="ij"), -1).reshape(-1, 3)
    amp = g.choice([-1, 1], (n, 1)) * g.uniform(0.3, 0.9, (n, 1))
    centre = g.uniform(-0.5, 0.5, (n, 1, 3))
    val = amp * np.exp(-0.5 * ((grid[None] - centre) ** 2).sum(-1))
    return val.reshape(n, 1, 3, 3, 3).astype(np.float32)


def test_criterion_10_prior_quality():
    torch.set_num_threads(1)
    t = time.perf_counter()
    vae = train_vae(structured_kernels(2000, seed=0), VAEHyperparams(max_epochs=300), torch.Generator().manual_seed(0))
    x = torch.as_tensor(structured_kernels(1000, seed=1))
    rec = reconstruct(vae, x)
    mse = float(((rec - x) ** 2).reshape(len(x), -1).mean(1).mean())
    var = float(x.reshape(len(x), -1).var(1, unbiased=False).mean())
    dt = time.perf_counter() - t
    ok = mse < 0.1 * var and dt < 600
    assert report(10, "kernel VAE reconstruction", ok, f"held-out MSE={mse:.2e}, 0.1 x variance={0.1 * var:.2e}, ratio={mse / var:.4f}, {dt:.0f}s")


# 11 --------------------------------------------------------------------------


def test_criterion_11_dwp_vs_ri(benchmark):
    t = time.perf_counter()
    ri = run_protocol(target_cfg("ri", benchmark), benchmark["target"])
    dwp = run_protocol(target_cfg("dwp", benchmark), benchmark["target"])
    dt = time.perf_counter() - t + benchmark["setup_s"]
    m_ri = ri.aggregate()[("ri", TRAIN_SIZE)]["dsc_mean"]
    m_dwp = dwp.aggregate()[("dwp", TRAIN_SIZE)]["dsc_mean"]
    ok = m_dwp >= m_ri - 0.02 and dt < 45 * 60
    per = [round(r.report.dsc_mean, 3) for r in ri.records], [round(r.report.dsc_mean, 3) for r in dwp.records]
    assert report(11, "toy benchmark DSC(DWP) >= DSC(RI) - 0.02 [soft]", ok,
                  f"RI={m_ri:.3f} {per[0]}, DWP={m_dwp:.3f} {per[1]}, {dt / 60:.1f} min incl. source+prior")
