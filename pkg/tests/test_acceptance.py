"""Acceptance suite: one group of tests per criterion.

The end-to-end group runs the default desk configuration once per session
(simulate, features, train, eval) and takes every relative-performance
comparison from that single run.
"""

import json
import math
import time

import numpy as np
import pytest
import yaml
from scipy.optimize import minimize

from shallowloc import harness
from shallowloc.baseline import pick_tdoa, wavefront_curvature_fix
from shallowloc.config import ExperimentConfig, load_config
from shallowloc.features import (FeatureWindows, FramingConfig, feature_maps, gcc,
                                 gcc_half_width, power_cepstrum, quefrency_bins, window_gcc)
from shallowloc.model import (FrameSet, LossParams, build_variant, evaluate_loss, polar_loss,
                              train_step, wrap_bearing)
from shallowloc.nn import BatchNorm, Conv1d, Dense, Dropout, Flatten, ReLU, SGDMomentum
from shallowloc.propagation import (EnvironmentModel, MultipathImpulse, SensorArray, SourceSpec,
                                    TransitPlan, propagate, simulate_transit)

D_SPACING, C = 14.0, 1500.0


def criterion(cid, text):
    return pytest.mark.criterion(cid, text)


# 1. cepstral echo delay ----------------------------------------------------------

@criterion("1", "liftered cepstrum argmax at echo delay within 1 bin (25 and 250 kHz)")
@pytest.mark.parametrize("fs", [25_000.0, 250_000.0])
@pytest.mark.parametrize("delay", [0.2e-3, 0.6e-3, 1.2e-3])
def test_c1_cepstral_echo_delay(fs, delay, record_property):
    framing = FramingConfig.for_rate(fs)
    n = framing.frame_length
    windows = FeatureWindows()
    start, stop = quefrency_bins(windows.q_min, windows.q_max, fs)
    rng = np.random.default_rng(int(delay * 1e6) + int(fs))
    echo = MultipathImpulse(delays=np.array([0.0, delay]), amplitudes=np.array([1.0, 0.5]))
    acc = np.zeros(stop - start)
    taper = framing.taper()
    for _ in range(100):
        # white source: a band-limited one puts a log-spectrum step at the band edge
        x = propagate(rng.standard_normal(n), echo, fs)
        power = np.mean(x**2)
        x = x + math.sqrt(power / 10**2) * rng.standard_normal(n)
        acc += power_cepstrum(x, taper)[start:stop]
    got = start + int(np.argmax(acc))
    want = delay * fs
    record_property("detail", f"fs={fs:g} D={delay * 1e3:g}ms bin {got} vs {want:g}")
    assert abs(got - want) <= 1


# 2. GCC TDOA accuracy -----------------------------------------------------------

@criterion("2", "PHAT TDOA error < 0.25 samples RMS at 20 dB")
def test_c2_gcc_tdoa_rms(record_property):
    fs = 25_000.0
    n = FramingConfig.for_rate(fs).frame_length
    max_lag = D_SPACING / C * fs
    half = gcc_half_width(D_SPACING, C, fs, 1)
    rng = np.random.default_rng(7)
    errs = []
    for _ in range(300):
        true = rng.uniform(-max_lag, max_lag)
        s = rng.standard_normal(n + 1024)
        # b lags a by `true` samples; both are cut from the same long record
        shift = MultipathImpulse(delays=np.array([(512 + true) / fs]), amplitudes=np.array([1.0]))
        base = MultipathImpulse(delays=np.array([512 / fs]), amplitudes=np.array([1.0]))
        a = propagate(s, base, fs)[1024:]
        b = propagate(s, shift, fs)[1024:]
        sigma = math.sqrt(np.mean(a**2) / 100)
        a = a + sigma * rng.standard_normal(n)
        b = b + sigma * rng.standard_normal(n)
        est = pick_tdoa(window_gcc(gcc(a, b, "phat"), half), fs)
        errs.append(est.tau * fs - true)
    rms = float(np.sqrt(np.mean(np.square(errs))))
    record_property("detail", f"rms={rms:.3f} samples")
    assert rms < 0.25


# 3. curvature inversion exactness --------------------------------------------------

@criterion("3", "closed-form curvature inversion exact to 1e-9 on 1000 positions")
def test_c3_curvature_exact(record_property):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        r = rng.uniform(20, 900)
        th = math.radians(rng.uniform(10, 170))
        x, y = r * math.cos(th), r * math.sin(th)
        r1 = math.hypot(x + D_SPACING, y)
        r3 = math.hypot(x - D_SPACING, y)
        fix = wavefront_curvature_fix((r1 - r) / C, (r - r3) / C, D_SPACING, C)
        assert fix.valid
        worst = max(worst, abs(fix.range - r) / r, abs(fix.bearing - th) / th)
    record_property("detail", f"max rel err {worst:.2e}")
    assert worst < 1e-9


# 4. gradient correctness ---------------------------------------------------------

def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def five_point_diff(f, x, h=1e-3):
    """Fourth-order stencil; truncation and rounding both stay near 1e-12."""
    g = np.zeros_like(x)
    for i in range(x.size):
        orig = x[i]
        vals = []
        for k in (2, 1, -1, -2):
            x[i] = orig + k * h
            vals.append(f())
        x[i] = orig
        g[i] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
    return g


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def layer_grad_error(layer, x, train=False, seed=None):
    w = np.random.default_rng(1).standard_normal(layer.forward(x, train, _rng(seed)).shape)

    def f():
        return float(np.sum(w * layer.forward(x, train, _rng(seed))))

    for p in layer.params():
        p.grad[...] = 0.0
    f()
    dx = layer.backward(w)
    errs = [rel_err(dx, central_diff(f, x))]
    for p in layer.params():
        errs.append(rel_err(p.grad.copy(), central_diff(f, p.value)))
    return max(errs)


def _rng(seed):
    return None if seed is None else np.random.default_rng(seed)


def _away_from_zero(shape, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    return x + 0.1 * np.sign(x)


LAYERS = {
    "conv1d": lambda: (Conv1d(2, 3, 4, rng=np.random.default_rng(0)), (3, 12, 2, 2), False, None),
    "dense": lambda: (Dense(7, 5, rng=np.random.default_rng(0)), (4, 7), False, None),
    "relu": lambda: (ReLU(), (3, 6, 2, 2), False, None),
    "flatten": lambda: (Flatten(), (3, 5, 2, 2), False, None),
    "batchnorm_conv": lambda: (BatchNorm(3), (4, 6, 2, 3), True, None),
    "batchnorm_dense": lambda: (BatchNorm(5), (6, 5), True, None),
    "dropout": lambda: (Dropout(0.5), (4, 9), True, 5),
}


@criterion("4", "finite-difference gradients: layers < 1e-4, loss < 1e-6, tiny net < 1e-3")
@pytest.mark.parametrize("name", list(LAYERS))
def test_c4_layer_gradients(name, record_property):
    layer, shape, train, seed = LAYERS[name]()
    for p in layer.params():
        p.value[...] += 0.1 * np.random.default_rng(2).standard_normal(p.value.shape)
    err = layer_grad_error(layer, _away_from_zero(shape, 4), train, seed)
    record_property("detail", f"{name} {err:.1e}")
    assert err < 1e-4


@criterion("4", "finite-difference gradients: layers < 1e-4, loss < 1e-6, tiny net < 1e-3")
def test_c4_loss_gradient(record_property):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
        t, phi = rng.uniform(-1, 2), rng.uniform(-3, 4)
        y, theta, alpha = rng.uniform(0.02, 2), rng.uniform(0, math.pi), rng.uniform(0, 1)
        _, gt, gp = polar_loss(t, phi, y, theta, alpha)
        x = np.array([t, phi])
        num = five_point_diff(lambda: float(polar_loss(x[0], x[1], y, theta, alpha)[0]), x)
        worst = max(worst, rel_err([gt, gp], num, floor=1e-4))
    record_property("detail", f"loss {worst:.1e}")
    assert worst < 1e-6


def _relu_masks(net):
    return [layer._cache.copy() for m in net.modules() for layer in m.layers
            if isinstance(layer, ReLU)]


@criterion("4", "finite-difference gradients: layers < 1e-4, loss < 1e-6, tiny net < 1e-3")
def test_c4_tiny_network_gradient(record_property):
    shapes = dict(cep_shape=(16, 3), gcc_shape=(16, 2), kernel_length=4, filters=4, dense_units=8,
                  dropout=0.5, batchnorm_dense=True)
    net = build_variant("combined", seed=1, **shapes)
    rng = np.random.default_rng(6)
    frames = FrameSet(rng.standard_normal((4, 16, 3)), rng.standard_normal((4, 16, 2)),
                      rng.uniform(10, 500, 4), rng.uniform(0, math.pi, 4), np.zeros(4),
                      np.zeros(4, dtype=int))
    params = LossParams(0.5, 500.0)

    def f():
        out = net.forward(frames.cepstral, frames.gcc, True, np.random.default_rng(9))
        E, _, _ = polar_loss(out[:, 0], out[:, 1], frames.range / 500, frames.bearing, 0.5)
        return float(E.mean())

    for p in net.params():
        p.grad[...] = 0.0
    out = net.forward(frames.cepstral, frames.gcc, True, np.random.default_rng(9))
    masks = _relu_masks(net)
    _, gt, gp = polar_loss(out[:, 0], out[:, 1], frames.range / 500, frames.bearing, 0.5)
    net.backward(np.stack([gt, gp], axis=1) / 4)
    worst, skipped, total = 0.0, 0, 0
    for p in net.params():
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = 1e-5 * max(1.0, abs(orig))
            vals, crossed = [], False
            for sign in (1, -1):
                flat[i] = orig + sign * h
                vals.append(f())
                crossed |= any(np.any(a != b) for a, b in zip(_relu_masks(net), masks))
            flat[i] = orig
            total += 1
            if crossed:
                skipped += 1
                continue
            worst = max(worst, rel_err(p.grad.reshape(-1)[i], (vals[0] - vals[1]) / (2 * h),
                                       floor=1e-7))
    record_property("detail", f"net {worst:.1e} ({skipped}/{total} kink-straddling entries)")
    assert skipped < 0.01 * total
    assert worst < 1e-3


# 5. loss sanity ------------------------------------------------------------------

@criterion("5", "E = 0 iff prediction equals truth; law of cosines to 1e-12")
@pytest.mark.parametrize("alpha", [0.1, 0.5, 0.9])
def test_c5_zero_only_at_truth(alpha, record_property):
    y, theta = 0.5, 1.2
    ts = np.linspace(-1.0, 1.5, 501)
    phis = np.linspace(-3.0, 4.5, 751)
    # put the truth on the grid exactly
    ts[np.argmin(np.abs(ts - y))] = y
    phis[np.argmin(np.abs(phis - theta))] = theta
    T, P = np.meshgrid(ts, phis)
    E, _, _ = polar_loss(T, P, y, theta, alpha)
    zero = np.argwhere(np.abs(E) <= 1e-15)
    assert len(zero) == 1
    j, i = zero[0]
    assert T[j, i] == y and P[j, i] == theta
    assert E.min() >= 0


@criterion("5", "E = 0 iff prediction equals truth; law of cosines to 1e-12")
def test_c5_law_of_cosines(record_property):
    rng = np.random.default_rng(8)
    t, phi = rng.uniform(-2, 2, 10000), rng.uniform(-4, 4, 10000)
    y, theta = rng.uniform(0, 2, 10000), rng.uniform(0, math.pi, 10000)
    E, _, _ = polar_loss(t, phi, y, theta, 1.0)
    cart = (y * np.cos(theta) - t * np.cos(phi)) ** 2 + (y * np.sin(theta) - t * np.sin(phi)) ** 2
    worst = float(np.max(np.abs(E - cart) / np.maximum(1.0, cart)))
    record_property("detail", f"max dev {worst:.1e}")
    assert worst <= 1e-12


# 6. full-rate shapes -------------------------------------------------------------

@criterion("6", "250 kHz maps are 320 x 3 and 480 x 2; three valid convs remove 27 bins")
def test_c6_full_rate_shapes(record_property):
    fs = 250_000.0
    rec = simulate_transit(TransitPlan.stationary((30.0, 80.0, 1.0), 0.2), SourceSpec(),
                           EnvironmentModel(), SensorArray(), fs, 20.0, seed=1)
    maps = feature_maps(rec, FramingConfig.for_rate(fs), FeatureWindows())
    assert maps
    cep, g = maps[0].cepstral.values.shape, maps[0].gcc.values.shape
    record_property("detail", f"cepstral {cep}, gcc {g}")
    assert cep == (320, 3) and g == (480, 2)
    net = build_variant("combined", cep_shape=cep, gcc_shape=g, filters=2, dense_units=4)
    x_c = np.zeros((2,) + cep)[..., None]
    x_g = np.zeros((2,) + g)[..., None]
    for branch, x, length in ((net.cep_branch, x_c, 320), (net.gcc_branch, x_g, 480)):
        for layer in branch.layers:
            if isinstance(layer, Flatten):
                break
            x = layer.forward(x, False, None)
        assert x.shape[1] == length - 27


# 7. overfit sanity ---------------------------------------------------------------

@criterion("7", "combined CNN overfits one 32-frame batch below 1e-3 of initial loss in 2000 steps")
def test_c7_overfit_single_batch(record_property):
    cfg = ExperimentConfig()
    cep_shape, gcc_shape = cfg.feature_windows().shapes(cfg.fs)
    net = build_variant("combined", cep_shape=cep_shape, gcc_shape=gcc_shape, dropout=0.0,
                        batchnorm_dense=cfg.net.batchnorm_dense, seed=0)
    rng = np.random.default_rng(0)
    batch = FrameSet(rng.standard_normal((32,) + tuple(cep_shape)),
                     rng.standard_normal((32,) + tuple(gcc_shape)),
                     rng.uniform(10, 500, 32), rng.uniform(0, math.pi, 32),
                     np.zeros(32), np.zeros(32, dtype=int))
    opt = SGDMomentum(cfg.train.lr, cfg.train.momentum, cfg.train.weight_decay)
    params = LossParams(cfg.train.alpha, 500.0)
    first = last = None
    for step in range(2000):
        last = train_step(net, opt, batch, params, rng)
        if first is None:
            first = last
        if last < 1e-3 * first:
            break
    record_property("detail", f"E {first:.3g} -> {last:.3g} after {step + 1} steps")
    assert last < 1e-3 * first


# 8-10. end to end --------------------------------------------------------------------

@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    cfg = ExperimentConfig()
    t0 = time.perf_counter()
    harness.cmd_simulate(cfg, root / "data")
    harness.cmd_features(cfg, root / "data", root / "feat")
    harness.cmd_train(cfg, root / "feat", root / "ckpt")
    report = harness.cmd_eval(cfg, root / "ckpt", root / "feat", root / "eval")
    return {"root": root, "cfg": cfg, "report": report, "elapsed": time.perf_counter() - t0}


def _compare(desk, a, b, kind, mask=None, dataset="test"):
    ra, rb = desk["report"].get(dataset, a), desk["report"].get(dataset, b)
    if mask is not None:
        ra, rb = ra.mask(mask(ra)), rb.mask(mask(rb))
    ea = ra.range_errors() if kind == "range" else np.degrees(ra.bearing_errors())
    eb = rb.range_errors() if kind == "range" else np.degrees(rb.bearing_errors())
    return harness.bootstrap_median_diff(ea, eb, seed=1)


def _not_worse(record_property, desk, a, b, kind, mask=None):
    diff, lo, hi = _compare(desk, a, b, kind, mask)
    unit = "m" if kind == "range" else "deg"
    record_property("detail", f"{a}-{b} {kind} {diff:+.2f}{unit} CI[{lo:+.2f},{hi:+.2f}]")
    # fails when a is worse than b with 95% confidence
    assert lo <= 0


def _endfire(cfg):
    return lambda res: harness.endfire_mask(res.true_bearing, cfg.eval.endfire_deg)


@criterion("8", "desk pipeline finishes within one hour on one core")
def test_c8_runtime(desk_run, record_property):
    record_property("detail", f"{desk_run['elapsed'] / 60:.1f} min")
    assert desk_run["elapsed"] < 3600


@criterion("8a", "combined range error <= gcc_only and <= baseline (test set)")
@pytest.mark.parametrize("other", ["cnn_gcc", "baseline"])
def test_c8a_combined_range(desk_run, other, record_property):
    _not_worse(record_property, desk_run, "cnn_combined", other, "range")


@criterion("8b", "combined endfire bearing error strictly below baseline")
def test_c8b_endfire_bearing(desk_run, record_property):
    diff, lo, hi = _compare(desk_run, "cnn_combined", "baseline", "bearing",
                            _endfire(desk_run["cfg"]))
    record_property("detail", f"combined-baseline endfire {diff:+.2f}deg CI[{lo:+.2f},{hi:+.2f}]")
    assert hi < 0


@criterion("8c", "GCC variants' bearing error <= cepstral_only's")
@pytest.mark.parametrize("variant", ["cnn_combined", "cnn_gcc"])
def test_c8c_gcc_bearing(desk_run, variant, record_property):
    _not_worse(record_property, desk_run, variant, "cnn_cepstral", "bearing")


@criterion("8d", "cepstral variants' range error <= gcc_only's")
@pytest.mark.parametrize("variant", ["cnn_combined", "cnn_cepstral"])
def test_c8d_cepstral_range(desk_run, variant, record_property):
    _not_worse(record_property, desk_run, variant, "cnn_gcc", "range")


@criterion("9", "generalization degrades combined median range error by at most 2x")
def test_c9_generalization(desk_run, record_property):
    test = np.median(desk_run["report"].get("test", "cnn_combined").range_errors())
    gen = np.median(desk_run["report"].get("generalization", "cnn_combined").range_errors())
    record_property("detail", f"test {test:.1f} m, generalization {gen:.1f} m, "
                              f"ratio {gen / test:.2f}")
    assert gen <= 2 * test


REDUCED = {
    "seed": 5,
    "transits": {"n_train": 3, "n_test": 1, "n_generalization": 1, "max_range": 80.0,
                 "generalization_max_range": 60.0, "speed": [8.0, 8.0], "cpa_offset": [5.0, 20.0]},
    "stratify": {"range_bins": 4, "per_bin": 40, "val_fraction": 0.2},
    "net": {"filters": 6, "dense_units": 16},
    "train": {"batch_size": 8, "max_epochs": 3},
    "eval": {"range_bins": 4},
}


def _pipeline(cfg, root):
    harness.cmd_simulate(cfg, root / "data")
    harness.cmd_features(cfg, root / "data", root / "feat")
    harness.cmd_train(cfg, root / "feat", root / "ckpt")
    return harness.cmd_eval(cfg, root / "ckpt", root / "feat", root / "eval")


@criterion("10", "repeated pipeline with the same seed gives identical eval reports")
def test_c10_determinism(tmp_path, record_property):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(REDUCED))
    cfg = load_config(p)
    a = _pipeline(cfg, tmp_path / "a")
    b = _pipeline(cfg, tmp_path / "b")
    names = [f.name for f in a.files]
    assert names == [f.name for f in b.files]
    for fa, fb in zip(a.files, b.files):
        assert fa.read_bytes() == fb.read_bytes(), fa.name
    for sub in ("data", "feat", "ckpt"):
        for f in sorted((tmp_path / "a" / sub).iterdir()):
            other = tmp_path / "b" / sub / f.name
            if f.name == "manifest.json":
                # the manifest records its own absolute data directory
                ja, jb = json.loads(f.read_text()), json.loads(other.read_text())
                ja.pop("data_dir"), jb.pop("data_dir")
                assert ja == jb
            else:
                assert f.read_bytes() == other.read_bytes(), f.name
    record_property("detail", f"{len(names)} report files byte-identical")


# trained-model checks on the desk run -----------------------------------------------

def _val_set(desk):
    feat = desk["root"] / "feat"
    return harness.load_referenced(feat, harness._load_manifest(feat)["val"])


@criterion("M1", "each variant's val loss beats the best constant predictor")
@pytest.mark.parametrize("variant", ["combined", "gcc_only", "cepstral_only"])
def test_variant_beats_constant_predictor(desk_run, variant, record_property):
    from shallowloc import io
    val = _val_set(desk_run)
    cfg = desk_run["cfg"]
    params = LossParams(cfg.train.alpha, cfg.range_scale())
    net, _ = io.read_checkpoint(desk_run["root"] / "ckpt" / f"{variant}.ckpt")
    y = val.range / params.range_scale

    def const_loss(v):
        return float(np.mean(polar_loss(v[0], v[1], y, val.bearing, params.alpha)[0]))

    best = minimize(const_loss, [y.mean(), val.bearing.mean()], method="Nelder-Mead")
    got = evaluate_loss(net, val, params)
    record_property("detail", f"{variant} {got:.4f} vs constant {best.fun:.4f}")
    assert got < best.fun


@criterion("M2", "combined net bearing on the most broadside val frame within 10 deg")
def test_broadside_val_frame(desk_run, record_property):
    from shallowloc import io
    val = _val_set(desk_run)
    net, _ = io.read_checkpoint(desk_run["root"] / "ckpt" / "combined.ckpt")
    i = int(np.argmin(np.abs(val.bearing - math.pi / 2)))
    phi = float(wrap_bearing(net.predict(val.cepstral[i:i + 1], val.gcc[i:i + 1])[0, 1]))
    record_property("detail", f"true {math.degrees(val.bearing[i]):.1f}, "
                              f"est {math.degrees(phi):.1f} deg")
    assert abs(phi - math.pi / 2) < math.pi / 18
