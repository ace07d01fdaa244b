"""Desk-scale experiment suite behind the CLI.

Each runner is a pure function of (config, seed): it writes order-stable
CSVs (plus optional PGM image dumps) into the configured output
directory and returns the rows it wrote.  Wall-clock measurements are
kept out of the CSVs so reruns are byte-identical; the efficiency runner
writes timings to a separate sidecar file instead.
"""

from __future__ import annotations

import os
import time

import numpy as np

from . import models as zoo
from .attacks import AttackConfig, gaussian_perturbation, prune_gradient, run_attack
from .config import ConfigError, ExperimentConfig, job_seed
from .data import Dataset, Sample, load_idx, synthetic_samples, write_pgm, write_report_csv
from .influence import (
    MixedJacobianOperator,
    SolverConfig,
    _dense_from_operator,
    dense_spectrum,
    expected_gaussian_risk,
    i2f_exact,
    i2f_lower_bound,
    lambda_max_power_iteration,
    theorem_bound,
)
from .models import InitScheme, initialize_parameters


def build_model_from_config(cfg: ExperimentConfig):
    kind = cfg.model.kind
    opt = dict(cfg.model.options)
    d_default = int(np.prod(cfg.data.shape))
    if kind == "linear":
        spec = zoo.linear_dot_model(int(opt.pop("d", d_default)))
    elif kind == "one_layer":
        spec = zoo.one_layer_model(int(opt.pop("d", d_default)),
                                   opt.pop("activation", "sigmoid"),
                                   float(opt.pop("target", 0.0)))
    elif kind == "mlp":
        spec = zoo.mlp_model(int(opt.pop("d", d_default)), int(opt.pop("hidden", 16)),
                             int(opt.pop("num_classes", cfg.data.num_classes)),
                             opt.pop("activation", "sigmoid"))
    elif kind == "lenet":
        spec = zoo.lenet_variant(
            in_channels=int(opt.pop("in_channels", cfg.data.shape[0])),
            image_size=int(opt.pop("image_size", cfg.data.shape[-1])),
            channels=int(opt.pop("channels", 12)),
            kernel=int(opt.pop("kernel", 5)),
            stride=int(opt.pop("stride", 2)),
            padding=int(opt.pop("padding", 2)),
            num_classes=int(opt.pop("num_classes", cfg.data.num_classes)),
            activation=opt.pop("activation", "sigmoid"),
        )
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    if opt:
        raise ConfigError(f"unknown model options: {sorted(opt)}")
    return spec


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.kind == "idx":
        return load_idx(d.images_path, d.labels_path, limit=d.count, num_classes=d.num_classes)
    return synthetic_samples(d.synthetic_kind, d.count, shape=d.shape, seed=d.seed,
                             num_classes=d.num_classes)


def model_input(spec, sample):
    img = np.asarray(sample.image, dtype=np.float64)
    want = tuple(spec.input_shape)
    if img.shape == want:
        return img
    if img.size == int(np.prod(want)):
        return img.reshape(want)
    raise ConfigError(f"sample shape {img.shape} incompatible with model input {want}")


def model_label(spec, sample):
    return sample.label if spec.loss == "cross_entropy" else None


def _csv_comments(cfg):
    return [f"config_hash={cfg.config_hash()}", f"seed={cfg.seed}"]


def _parameter_epochs(cfg, spec, dataset):
    """(epoch, ParameterSet) list: the initialization plus optional SGD snapshots."""
    params = initialize_parameters(spec, cfg.init)
    out = [(0, params)]
    if cfg.train.epochs > 0:
        fitted = [Sample(model_input(spec, s), model_label(spec, s) or 0, s.source)
                  for s in dataset]
        train_set = Dataset(tuple(fitted), dataset.num_classes, tuple(spec.input_shape))
        snaps = zoo.train_model(spec, params, train_set, cfg.train.epochs, cfg.train.lr)
        out += [(e + 1, p) for e, p in enumerate(snaps)]
    return out


def _realize_perturbation(pert, op, g0, seed):
    """Return (delta, description value) for one perturbation spec."""
    if pert.kind == "gaussian":
        _, delta = gaussian_perturbation(g0, pert.variance, seed=seed)
        return delta, pert.variance
    if pert.kind == "prune":
        _, delta = prune_gradient(g0, pert.ratio)
        return delta, pert.ratio
    J = _dense_from_operator(op, budget=10_000_000)
    _, s, vt = np.linalg.svd(J, full_matrices=False)
    if pert.index >= s.size:
        raise ConfigError(f"singular direction index {pert.index} out of range")
    return pert.scale * vt[pert.index], float(s[pert.index])


def run_audit(cfg: ExperimentConfig):
    """One row per (sample, perturbation, epoch): metric values vs. attack error."""
    spec = build_model_from_config(cfg)
    dataset = load_dataset(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    header = ["sample", "epoch", "pert_kind", "pert_param", "delta_norm", "epsilon",
              "i2f_exact", "i2f_lower_bound", "lambda_max", "attack_kind",
              "attack_l2", "attack_rmse", "attack_final_loss"]
    rows = []
    n = min(cfg.samples, len(dataset))
    for epoch, params in _parameter_epochs(cfg, spec, dataset):
        for si in range(n):
            sample = dataset[si]
            x0 = model_input(spec, sample)
            y = model_label(spec, sample)
            op = MixedJacobianOperator(spec, params, x0, y)
            g0 = op.g_theta
            for pi, pert in enumerate(cfg.perturbations):
                seed = job_seed(cfg.seed, epoch, si, pi)
                delta, param_val = _realize_perturbation(pert, op, g0, seed)
                exact = i2f_exact(op, delta, cfg.solver)
                lb = i2f_lower_bound(op, delta, seed=seed)
                atk_cfg = AttackConfig(
                    kind=cfg.attack.kind, iterations=cfg.attack.iterations,
                    learning_rate=cfg.attack.learning_rate, beta1=cfg.attack.beta1,
                    beta2=cfg.attack.beta2, adam_eps=cfg.attack.adam_eps,
                    dummy_init=cfg.attack.dummy_init, box_projection=cfg.attack.box_projection,
                    seed=job_seed(cfg.seed, epoch, si, pi, 1))
                res = run_attack(spec, params, g0 + delta, y, atk_cfg, x0=x0)
                if cfg.dump_images:
                    _dump_pair(cfg.output_dir, f"audit_e{epoch}_s{si}_p{pi}", x0, res.x_star,
                               np.asarray(sample.image).shape)
                rows.append([si, epoch, pert.kind, param_val, float(np.linalg.norm(delta)),
                             cfg.solver.epsilon, exact.exact_value, lb.lower_bound,
                             lb.lambda_max, cfg.attack.kind, res.l2, res.rmse, res.final_loss])
    path = os.path.join(cfg.output_dir, "audit.csv")
    write_report_csv(rows, path, header=header, comments=_csv_comments(cfg))
    return rows, path


def _direction_indices(rank, k):
    return sorted(set(int(i) for i in np.round(np.linspace(0, rank - 1, k))))


def run_eigen_defense(cfg: ExperimentConfig):
    """Equal-norm perturbations along singular directions spanning the spectrum."""
    spec = build_model_from_config(cfg)
    dataset = load_dataset(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    scale = next((p.scale for p in cfg.perturbations if p.kind == "singular_direction"), 1.0)
    header = ["sample", "direction_rank", "sigma", "lambda", "inv_sigma", "inv_lambda",
              "delta_norm", "attack_l2", "attack_mse"]
    rows = []
    n = min(cfg.samples, len(dataset))
    params = initialize_parameters(spec, cfg.init)
    for si in range(n):
        sample = dataset[si]
        x0 = model_input(spec, sample)
        y = model_label(spec, sample)
        op = MixedJacobianOperator(spec, params, x0, y)
        J = _dense_from_operator(op, budget=10_000_000)
        _, s, vt = np.linalg.svd(J, full_matrices=False)
        rank = int(np.sum(s > 1e-10 * s[0]))
        for di in _direction_indices(rank, cfg.eigen_directions):
            delta = scale * vt[di]
            atk_cfg = AttackConfig(
                kind=cfg.attack.kind, iterations=cfg.attack.iterations,
                learning_rate=cfg.attack.learning_rate, dummy_init=cfg.attack.dummy_init,
                box_projection=cfg.attack.box_projection, seed=job_seed(cfg.seed, si, di))
            res = run_attack(spec, params, op.g_theta + delta, y, atk_cfg, x0=x0)
            if cfg.dump_images:
                _dump_pair(cfg.output_dir, f"eigen_s{si}_d{di}", x0, res.x_star,
                           np.asarray(sample.image).shape)
            rows.append([si, di, float(s[di]), float(s[di] ** 2), float(1.0 / s[di]),
                         float(1.0 / s[di] ** 2), float(np.linalg.norm(delta)),
                         res.l2, res.rmse ** 2])
    path = os.path.join(cfg.output_dir, "eigen_defense.csv")
    write_report_csv(rows, path, header=header, comments=_csv_comments(cfg))
    return rows, path


def run_fairness(cfg: ExperimentConfig):
    """Per-sample attack MSE under one fixed Gaussian noise level, plus
    per-class aggregates; surfaces the spread that a mean hides."""
    spec = build_model_from_config(cfg)
    dataset = load_dataset(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    variance = next((p.variance for p in cfg.perturbations if p.kind == "gaussian"), 1e-3)
    params = initialize_parameters(spec, cfg.init)
    sample_header = ["sample", "label", "variance", "delta_norm", "i2f_lower_bound",
                     "attack_l2", "attack_mse"]
    rows = []
    n = min(cfg.samples, len(dataset))
    results = []
    for si in range(n):
        sample = dataset[si]
        x0 = model_input(spec, sample)
        y = model_label(spec, sample)
        op = MixedJacobianOperator(spec, params, x0, y)
        _, delta = gaussian_perturbation(op.g_theta, variance, seed=job_seed(cfg.seed, si))
        lb = i2f_lower_bound(op, delta, seed=job_seed(cfg.seed, si, 1))
        atk_cfg = AttackConfig(
            kind=cfg.attack.kind, iterations=cfg.attack.iterations,
            learning_rate=cfg.attack.learning_rate, dummy_init=cfg.attack.dummy_init,
            box_projection=cfg.attack.box_projection, seed=job_seed(cfg.seed, si, 2))
        res = run_attack(spec, params, op.g_theta + delta, y, atk_cfg, x0=x0)
        rows.append([si, sample.label, variance, float(np.linalg.norm(delta)),
                     lb.lower_bound, res.l2, res.rmse ** 2])
        results.append((si, sample, res))
    sample_path = os.path.join(cfg.output_dir, "fairness_samples.csv")
    write_report_csv(rows, sample_path, header=sample_header, comments=_csv_comments(cfg))

    class_rows = []
    by_class = {}
    for r in rows:
        by_class.setdefault(r[1], []).append(r[6])
    for label in sorted(by_class):
        mses = np.array(by_class[label])
        class_rows.append([label, len(mses), float(mses.mean()),
                           float(mses.var()) if len(mses) > 1 else 0.0])
    class_path = os.path.join(cfg.output_dir, "fairness_classes.csv")
    write_report_csv(class_rows, class_path, header=["label", "count", "mean_mse", "var_mse"],
                     comments=_csv_comments(cfg))

    if cfg.dump_images and results:
        ordered = sorted(results, key=lambda t: t[2].rmse)
        for tag, (si, sample, res) in (("best", ordered[0]), ("worst", ordered[-1])):
            _dump_pair(cfg.output_dir, f"fairness_{tag}_s{si}", model_input(spec, sample),
                       res.x_star, np.asarray(sample.image).shape)
    return rows, class_rows, sample_path, class_path


def run_init_compare(cfg: ExperimentConfig):
    """Attack the same samples under each initialization scheme."""
    spec = build_model_from_config(cfg)
    dataset = load_dataset(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    variance = next((p.variance for p in cfg.perturbations if p.kind == "gaussian"), 1e-3)
    header = ["scheme", "sample", "repetition", "variance", "expected_sq_risk",
              "attack_l2", "attack_mse"]
    rows = []
    n = min(cfg.samples, len(dataset))
    for scheme_idx, scheme_kind in enumerate(cfg.init_schemes):
        params = initialize_parameters(spec, InitScheme(scheme_kind, cfg.init.seed))
        for si in range(n):
            sample = dataset[si]
            x0 = model_input(spec, sample)
            y = model_label(spec, sample)
            op = MixedJacobianOperator(spec, params, x0, y)
            spectrum = dense_spectrum(op)
            nonzero = spectrum.eigenvalues[spectrum.eigenvalues > spectrum.rank_threshold]
            exp_risk = float(variance * np.sum(1.0 / nonzero))
            for rep in range(cfg.repetitions):
                seed = job_seed(cfg.seed, scheme_idx, si, rep)
                _, delta = gaussian_perturbation(op.g_theta, variance, seed=seed)
                atk_cfg = AttackConfig(
                    kind=cfg.attack.kind, iterations=cfg.attack.iterations,
                    learning_rate=cfg.attack.learning_rate, dummy_init=cfg.attack.dummy_init,
                    box_projection=cfg.attack.box_projection, seed=job_seed(seed, 1))
                res = run_attack(spec, params, op.g_theta + delta, y, atk_cfg, x0=x0)
                rows.append([scheme_kind, si, rep, variance, exp_risk, res.l2, res.rmse ** 2])
    path = os.path.join(cfg.output_dir, "init_compare.csv")
    write_report_csv(rows, path, header=header, comments=_csv_comments(cfg))
    return rows, path


def run_efficiency(cfg: ExperimentConfig, n_seeds=5, learning_rates=(1.0, 0.5, 0.1, 0.05, 0.01)):
    """Power-iteration convergence traces vs. attack-loss traces.

    Iteration traces go into the CSV (deterministic); wall-clock numbers
    go into a sidecar timings file, which reruns may legitimately change.
    """
    spec = build_model_from_config(cfg)
    dataset = load_dataset(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    params = initialize_parameters(spec, cfg.init)
    sample = dataset[0]
    x0 = model_input(spec, sample)
    y = model_label(spec, sample)

    power_rows = []
    metric_time = 0.0
    for s in range(n_seeds):
        op = MixedJacobianOperator(spec, params, x0, y)
        t0 = time.perf_counter()
        _, _, _, trace = lambda_max_power_iteration(op, iters=200, tol=1e-9,
                                                    seed=job_seed(cfg.seed, s))
        metric_time = max(metric_time, time.perf_counter() - t0)
        power_rows += [[s, i, v] for i, v in enumerate(trace)]
    power_path = os.path.join(cfg.output_dir, "efficiency_power_iteration.csv")
    write_report_csv(power_rows, power_path, header=["seed", "iteration", "lambda_estimate"],
                     comments=_csv_comments(cfg))

    attack_rows = []
    attack_time = float("inf")
    op = MixedJacobianOperator(spec, params, x0, y)
    for lr in learning_rates:
        for s in range(n_seeds):
            atk_cfg = AttackConfig(kind=cfg.attack.kind, iterations=cfg.attack.iterations,
                                   learning_rate=lr, dummy_init=cfg.attack.dummy_init,
                                   box_projection=cfg.attack.box_projection,
                                   seed=job_seed(cfg.seed, s, int(lr * 1000)))
            res = run_attack(spec, params, op.g_theta, y, atk_cfg, x0=x0)
            attack_time = min(attack_time, res.wall_time)
            attack_rows += [[lr, s, i, v] for i, v in enumerate(res.loss_trace)]
    attack_path = os.path.join(cfg.output_dir, "efficiency_attack.csv")
    write_report_csv(attack_rows, attack_path,
                     header=["learning_rate", "seed", "iteration", "inversion_loss"],
                     comments=_csv_comments(cfg))

    ratio = attack_time / metric_time if metric_time > 0 else float("inf")
    with open(os.path.join(cfg.output_dir, "efficiency_timings.txt"), "w") as f:
        f.write(f"power_iteration_max_seconds={metric_time:.6f}\n")
        f.write(f"attack_min_seconds={attack_time:.6f}\n")
        f.write(f"time_ratio_attack_over_metric={ratio:.6f}\n")
    return power_rows, attack_rows, ratio


def run_spectrum(cfg: ExperimentConfig):
    spec = build_model_from_config(cfg)
    dataset = load_dataset(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    params = initialize_parameters(spec, cfg.init)
    rows = []
    n = min(cfg.samples, len(dataset))
    for si in range(n):
        sample = dataset[si]
        op = MixedJacobianOperator(spec, params, model_input(spec, sample),
                                   model_label(spec, sample))
        rep = dense_spectrum(op)
        rows += [[si, i, float(lam), float(sig)]
                 for i, (lam, sig) in enumerate(zip(rep.eigenvalues, rep.singular_values))]
    path = os.path.join(cfg.output_dir, "spectrum.csv")
    write_report_csv(rows, path, header=["sample", "rank", "eigenvalue", "singular_value"],
                     comments=_csv_comments(cfg))
    return rows, path


def _dump_pair(out_dir, tag, x0, x_star, image_shape=None):
    if image_shape is not None:
        x0 = np.asarray(x0).reshape(image_shape)
        x_star = np.asarray(x_star).reshape(image_shape)
    if x0.ndim == 3 and x0.shape[0] != 1:
        return  # PGM dumps are for single-channel images only
    if x0.ndim == 1:
        x0 = x0.reshape(1, -1)
        x_star = np.asarray(x_star).reshape(1, -1)
    write_pgm(np.clip(x0, 0.0, 1.0), os.path.join(out_dir, f"{tag}_original.pgm"))
    write_pgm(np.clip(x_star, 0.0, 1.0), os.path.join(out_dir, f"{tag}_recovered.pgm"))


# ---------------------------------------------------------------------------
# validation suite


def run_validate(seed=0, perturb_vjp=None):
    """Cross-check every dual-route pair on small models.

    Returns (all_passed, report_lines).  `perturb_vjp` lets tests inject
    a fault into the transpose product to prove the adjoint check bites.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    checks = []

    def record(name, err, tol):
        checks.append((name, float(err), float(tol), err <= tol))

    lin = zoo.linear_dot_model(6)
    one = zoo.one_layer_model(6, "sigmoid", 0.3)
    mlp = zoo.mlp_model(6, 8, 3)
    cases = []
    for name, spec in (("linear", lin), ("one_layer", one), ("mlp", mlp)):
        params = initialize_parameters(spec, InitScheme("xavier", seed + 7))
        x = rng.uniform(0, 1, spec.input_shape)
        y = 1 if spec.loss == "cross_entropy" else None
        cases.append((name, spec, params, x, y))

    # gradients vs. central finite differences
    for name, spec, params, x, y in cases:
        g = zoo.gradients(spec, params, x, y)
        fd = zoo.finite_difference_oracle(spec, params, x, y, "grad_theta")
        scale = max(np.abs(fd).max(), 1e-12)
        record(f"finite_difference_grad_theta[{name}]", np.abs(g.g_theta - fd).max() / scale, 1e-6)

    # mixed JVP vs. finite differences of gradients
    for name, spec, params, x, y in cases:
        delta = rng.normal(size=spec.d_theta)
        jv = zoo.mixed_jvp(spec, params, x, y, delta)
        fd = zoo.finite_difference_oracle(spec, params, x, y, "jvp", delta=delta)
        scale = max(np.abs(fd).max(), 1e-12)
        record(f"finite_difference_mixed_jvp[{name}]", np.abs(jv - fd).max() / scale, 1e-5)

    # adjoint identity <J d, b> == <d, J^T b>
    for name, spec, params, x, y in cases:
        op = MixedJacobianOperator(spec, params, x, y)
        worst = 0.0
        for _ in range(20):
            d = rng.normal(size=spec.d_theta)
            b = rng.normal(size=spec.d_x)
            jd_b = float(op.jvp(d) @ b)
            vj = op.vjp(b)
            if perturb_vjp is not None:
                vj = perturb_vjp(vj)
            worst = max(worst, abs(jd_b - float(d @ vj)) / (1.0 + abs(jd_b)))
        record(f"adjoint_identity[{name}]", worst, 1e-9)

    # dense vs. matrix-free solvers at eps = 1
    name, spec, params, x, y = cases[2]
    op = MixedJacobianOperator(spec, params, x, y)
    delta = rng.normal(size=spec.d_theta)
    ref = i2f_exact(op, delta, SolverConfig(mode="dense", epsilon=1.0)).exact_value
    for mode in ("gradient_descent", "conjugate_gradient", "neumann"):
        val = i2f_exact(op, delta, SolverConfig(mode=mode, epsilon=1.0, max_iters=2000)).exact_value
        record(f"solver_agreement[{mode}]", abs(val - ref) / ref, 1e-4)

    # Gaussian expectation identity, Monte Carlo
    spectrum = dense_spectrum(op)
    closed = expected_gaussian_risk(spectrum, 1.0)
    vals = []
    cg = SolverConfig(mode="conjugate_gradient", epsilon=0.0, max_iters=2000)
    for _ in range(300):
        d = rng.normal(size=spec.d_theta)
        vals.append(i2f_exact(op, d, cg).exact_value ** 2)
    vals = np.array(vals)
    se = vals.std(ddof=1) / np.sqrt(len(vals))
    record("gaussian_expectation_monte_carlo", abs(vals.mean() - closed), 3 * se)

    # certified bound is exact on the linear model
    name, spec, params, x, y = cases[0]
    op = MixedJacobianOperator(spec, params, x, y)
    d = rng.normal(size=spec.d_theta)
    bound = theorem_bound(1.0, 1.0, 0.0, op.g_theta, d, np.linalg.norm(op.jvp(d)))
    record("certified_bound_linear_exact", abs(bound - np.linalg.norm(d)), 1e-9)

    lines = [
        f"{'PASS' if ok else 'FAIL'} {name}: error={err:.3e} tolerance={tol:.3e}"
        for name, err, tol, ok in checks
    ]
    return all(ok for *_, ok in checks), lines
