"""
Command-line front end: data generation, training, evaluation, comparison and
model inspection.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 data error.
"""
import os
import sys
import logging
import functools
from dataclasses import replace
from typing import Dict, List, Optional, Tuple

import click
import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from data_prep import (
    SnapshotDataset,
    energy_table,
    infer_output_matrix,
    preproject,
    read_dataset,
    write_dataset,
)
from errors import ConfigError, DataError, NumericalError
from evaluation import compare, evaluate_model, make_test_set
from fom import QuadraticFOM, fom_from_description, make_training_set
from model_io import load_model, save_model
from numerics import condition_number, eigenvalues, spectral_abscissa
from opinf import fit_gasopinf, fit_opinf
from rom import RomModel, latent_tensors, lift, oblique_factor, pod_galerkin
from run_config import RunConfig, dump_run_config, load_run_config
from stability import StableLatentParams, energy_rate, lyapunov_weight
from training import PodBasis, optimize, pod

logger = logging.getLogger(__name__)

EXIT_CONFIG, EXIT_NUMERICAL, EXIT_DATA = 2, 3, 4


def _guarded(fn):
    """Map the package's error families onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"Configuration error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except NumericalError as exc:
            click.echo(f"Numerical failure: {exc}", err=True)
            sys.exit(EXIT_NUMERICAL)
        except (DataError, FileNotFoundError) as exc:
            click.echo(f"Data error: {exc}", err=True)
            sys.exit(EXIT_DATA)
        except ValueError as exc:
            click.echo(f"Configuration error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)

    return wrapper


def _floats(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError("amplitudes", f"not a list of numbers: {text!r}") from None


def _config(ctx: click.Context, overrides: Dict) -> RunConfig:
    merged = dict(ctx.obj["overrides"])
    merged.update(overrides)
    return load_run_config(ctx.obj["config"], merged)


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except NumericalError as exc:
        if exc.stage is None:
            exc.stage = name
        raise


def _generated(field: str, fn, *args, **kwargs):
    """Run a config-driven generator, reporting plain argument errors against ``field``."""
    try:
        return fn(*args, **kwargs)
    except (ConfigError, DataError):
        raise
    except ValueError as exc:
        raise ConfigError(field, str(exc)) from exc


def _reduced_fom(fom: QuadraticFOM, basis: np.ndarray) -> QuadraticFOM:
    A, H, B = fom.project(basis, basis)
    C = None if fom.C is None else fom.C @ basis
    return QuadraticFOM(A=A, H=H, B=B, C=C, description=fom.describe())


def load_training_data(config: RunConfig) -> Tuple[SnapshotDataset, Optional[QuadraticFOM]]:
    """Read the configured dataset or generate it from the configured FOM."""
    if config.data.path is None and not config.data.fom:
        raise ConfigError("data", "either data.path or data.fom must be given")
    fom = fom_from_description(config.data.fom) if config.data.fom else None
    if config.data.path is not None:
        dataset = read_dataset(config.data.path, prefer_binary=config.data.binary)
    else:
        dataset = _generated("data", make_training_set, fom, config.data.protocol,
                             config.data.amplitudes, config.data.t_end, config.data.samples,
                             step_factor=config.train.step_factor)
    if fom is not None and fom.n != dataset.n:
        raise DataError(f"FOM dimension {fom.n} does not match dataset dimension {dataset.n}")
    return dataset, fom


def _pod_info(basis: PodBasis) -> Dict[str, str]:
    return {
        "pod_variance_captured": f"{basis.variance_captured:.12g}",
        "pod_singular_values": " ".join(f"{s:.12g}" for s in basis.singular_values),
    }


def train_chain(
    config: RunConfig,
    dataset: SnapshotDataset,
    fom: Optional[QuadraticFOM] = None,
) -> Tuple[RomModel, pd.DataFrame]:
    """
    Build a model of ``config.method`` through its initialization chain.

    POD -> POD-Galerkin (when a FOM is available) -> OpInf or GasOpInf ->
    NiTROM or GasNiTROM. Datasets are optionally pre-projected onto a large POD
    basis first and the final model is lifted back to full coordinates.

    Raises:
        NumericalError: With ``stage`` naming the step that failed.
    """
    full_C = None
    basis = None
    if config.data.preproject is not None:
        full_C = fom.C if fom is not None else infer_output_matrix(dataset)
        dataset, basis = preproject(dataset, config.data.preproject, random_state=config.seed)
        if basis is not None and fom is not None:
            fom = _reduced_fom(fom, basis)

    method, r = config.method, config.r
    pod_basis = _stage("pod", pod, dataset, r)
    phi = pod_basis.modes
    history = pd.DataFrame()

    if method == "pod-galerkin":
        model = _stage("pod-galerkin", pod_galerkin, fom, phi)
    elif method in ("opinf", "nitrom"):
        model = _stage("opinf", fit_opinf, dataset, r, config.opinf.reg, fom=fom, phi=phi)
    else:
        model, history = _stage("gasopinf", fit_gasopinf, dataset, r, config.opinf.gas_reg, fom=fom,
                                phi=phi, max_iter=config.opinf.gas_iterations,
                                init_route=config.opinf.init_route, config=config.train.lbfgs)
    model = replace(model, info={**model.info, **_pod_info(pod_basis)})
    log_diagnostics(model)

    if method in ("nitrom", "gasnitrom"):
        model = replace(model, method=method)
        model, trained = _stage(method, optimize, model, dataset, config.train, stage=method)
        history = pd.concat([history, trained], ignore_index=True) if len(history) else trained
        log_diagnostics(model)

    if basis is not None:
        model = lift(model, basis, full_C)
        logger.info(f"Lifted model back to full coordinates (n={model.n})")
    return model, history


def model_diagnostics(model: RomModel, samples: int = 16, seed: int = 0) -> Dict:
    """Stability and conditioning summary of a model."""
    A, H, _ = latent_tensors(model)
    info = {
        "method": model.method,
        "n": model.n, "r": model.r, "m": model.m, "p": model.p,
        "eigenvalues": eigenvalues(A),
        "spectral_abscissa": spectral_abscissa(A),
        "cond_psi_phi": oblique_factor(model).cond,
    }
    if isinstance(model.dynamics, StableLatentParams):
        Qt = lyapunov_weight(model.dynamics)
        info["sigma_min_R"] = float(np.linalg.svd(model.dynamics.R, compute_uv=False).min())
        info["cond_Q_tilde"] = condition_number(Qt)
        rng = np.random.default_rng(seed)
        rates = [energy_rate(A, H, Qt, z) for z in rng.standard_normal((samples, model.r))]
        info["max_linear_rate"] = max(lin for lin, _ in rates)
        info["max_quadratic_rate"] = max(abs(quad) for _, quad in rates)
    return info


def log_diagnostics(model: RomModel) -> None:
    d = model_diagnostics(model)
    line = f"{d['method']}: spectral abscissa {d['spectral_abscissa']:.6g}, cond(Psi^T Phi) {d['cond_psi_phi']:.3e}"
    if "cond_Q_tilde" in d:
        line += f", cond(Q~) {d['cond_Q_tilde']:.3e}, sigma_min(R) {d['sigma_min_R']:.3e}"
    logger.info(line)


def _truth(config: RunConfig, model: RomModel, fom_text: Optional[str]) -> SnapshotDataset:
    if config.test.path is not None:
        return read_dataset(config.test.path)
    text = fom_text or model.info.get("fom")
    if not text:
        raise DataError("no ground truth: give --truth or a FOM (--fom, or a model trained with one)")
    return _generated("test", make_test_set, fom_from_description(text), config.test.protocol,
                      config.test.amplitudes, config.test.count, config.test.low, config.test.high,
                      config.test.t_end, config.test.samples, config.test.frequency, config.test.seed,
                      config.train.step_factor)


def _test_overrides(protocol, amplitudes, count, t_end, samples, truth) -> Dict:
    return {
        "test.protocol": protocol,
        "test.amplitudes": _floats(amplitudes),
        "test.count": count,
        "test.t_end": t_end,
        "test.samples": samples,
        "test.path": truth,
    }


def _test_options(fn):
    for option in reversed([
        click.option("--fom", "fom_text", default=None, help="FOM description, e.g. toy:nu=20"),
        click.option("--truth", default=None, type=click.Path(), help="Ground-truth dataset directory"),
        click.option("--protocol", default=None, help="step, impulse, sinusoid or sine"),
        click.option("--amplitudes", default=None, help="Comma-separated test amplitudes"),
        click.option("--count", type=int, default=None, help="Number of random test amplitudes"),
        click.option("--t-end", type=float, default=None, help="Final test time"),
        click.option("--samples", type=int, default=None, help="Samples on [0, t-end]"),
    ]):
        fn = option(fn)
    return fn


@click.group()
@click.option("--config", "config_path", default=None, type=click.Path(), help="YAML run configuration")
@click.option("--threads", type=int, default=None, help="Worker and BLAS thread cap (1 is deterministic)")
@click.option("--output-dir", default=None, help="Directory for run outputs")
@click.option("--verbose", is_flag=True, help="Debug logging")
@click.pass_context
def main(ctx: click.Context, config_path, threads, output_dir, verbose):
    """Stable quadratic reduced-order models: generate, train, evaluate, compare, inspect."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format='%(asctime)s - %(levelname)s - %(message)s')
    ctx.obj = {"config": config_path, "overrides": {"threads": threads, "output_dir": output_dir}}


@main.command()
@click.option("--fom", "fom_text", default=None, help="FOM description, e.g. toy:nu=20 or synthetic:n=200,seed=0")
@click.option("--protocol", default=None, help="step, impulse or sinusoid")
@click.option("--amplitudes", default=None, help="Comma-separated amplitudes")
@click.option("--t-end", type=float, default=None)
@click.option("--samples", type=int, default=None)
@click.option("--binary/--no-binary", default=None, help="Also write binary trajectory twins")
@click.option("--out", default=None, help="Dataset directory (default <output-dir>/data)")
@click.pass_context
@_guarded
def generate(ctx, fom_text, protocol, amplitudes, t_end, samples, binary, out):
    """Simulate a FOM under a training protocol and write the dataset."""
    config = _config(ctx, {"data.fom": fom_text, "data.protocol": protocol,
                           "data.amplitudes": _floats(amplitudes), "data.t_end": t_end,
                           "data.samples": samples, "data.binary": binary})
    if not config.data.fom:
        raise ConfigError("data.fom", "generate needs a full-order model")
    with threadpool_limits(limits=config.threads):
        config.data.path = None
        dataset, _ = load_training_data(config)
        out = out or os.path.join(config.output_dir, "data")
        write_dataset(dataset, out, binary=config.data.binary)

    table = energy_table(dataset)
    click.echo(f"Wrote {dataset.n_traj} trajectories to {out}")
    click.echo(table.iloc[:: max(1, len(table) // 10)].to_string(index=False, float_format="%.6e"))


@main.command()
@click.option("--method", default=None, help="gasnitrom, nitrom, gasopinf, opinf or pod-galerkin")
@click.option("-r", "--rank", "r", type=int, default=None, help="Latent dimension")
@click.option("--data", "data_path", default=None, type=click.Path(), help="Dataset directory")
@click.option("--fom", "fom_text", default=None, help="FOM description")
@click.option("--step-factor", type=int, default=None, help="RK4 steps per sample interval")
@click.option("--adjoint", default=None, help="discrete or continuous")
@click.pass_context
@_guarded
def train(ctx, method, r, data_path, fom_text, step_factor, adjoint):
    """Train a model and write model.h5, history.csv and the effective config."""
    config = _config(ctx, {"method": method, "r": r, "data.path": data_path, "data.fom": fom_text,
                           "train.step_factor": step_factor, "train.adjoint_scheme": adjoint})
    logger.info("=" * 60)
    logger.info(f"Training {config.method} with r={config.r}")
    logger.info("=" * 60)

    with threadpool_limits(limits=config.threads):
        dataset, fom = load_training_data(config)
        model, history = train_chain(config, dataset, fom)

    os.makedirs(config.output_dir, exist_ok=True)
    model_path = os.path.join(config.output_dir, "model.h5")
    save_model(model, model_path)
    history.to_csv(os.path.join(config.output_dir, "history.csv"), index=False, float_format="%.17g")
    dump_run_config(config, os.path.join(config.output_dir, "config.yaml"))
    click.echo(f"Model written to {model_path}")


@main.command()
@click.argument("model_path", type=click.Path())
@_test_options
@click.option("--out", default=None, help="Error-curve CSV (default <output-dir>/errors.csv)")
@click.pass_context
@_guarded
def evaluate(ctx, model_path, fom_text, truth, protocol, amplitudes, count, t_end, samples, out):
    """Simulate a model on test inputs and write its error curve."""
    config = _config(ctx, _test_overrides(protocol, amplitudes, count, t_end, samples, truth))
    model = load_model(model_path)
    with threadpool_limits(limits=config.threads):
        truth_data = _truth(config, model, fom_text)
        curve, blowup = evaluate_model(model, truth_data, config.train.step_factor)

    out = out or os.path.join(config.output_dir, "errors.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    curve.to_csv(out, index=False, float_format="%.17g")
    blown = int(np.isfinite(blowup).sum())
    click.echo(f"Error curve written to {out}; blow-ups: {blown}/{truth_data.n_traj}")


def _labels(paths: List[str]) -> List[str]:
    labels = []
    for path in paths:
        stem = os.path.splitext(os.path.basename(os.path.normpath(path)))[0]
        if stem in ("model", "errors"):
            stem = os.path.basename(os.path.dirname(os.path.abspath(path))) or stem
        label, k = stem, 2
        while label in labels:
            label, k = f"{stem}_{k}", k + 1
        labels.append(label)
    return labels


@main.command(name="compare")
@click.argument("paths", nargs=-1, type=click.Path())
@_test_options
@click.option("--out", default=None, help="Combined CSV (default <output-dir>/compare.csv)")
@click.pass_context
@_guarded
def compare_cmd(ctx, paths, fom_text, truth, protocol, amplitudes, count, t_end, samples, out):
    """Compare models (.h5) or saved error curves (.csv) on one test grid."""
    if len(paths) < 2:
        raise ConfigError("paths", "compare needs at least two models or error curves")
    config = _config(ctx, _test_overrides(protocol, amplitudes, count, t_end, samples, truth))

    curves = {}
    truth_data = None
    with threadpool_limits(limits=config.threads):
        for label, path in zip(_labels(list(paths)), paths):
            if path.endswith(".csv"):
                if not os.path.exists(path):
                    raise FileNotFoundError(f"Error curve not found: {path}")
                curves[label] = pd.read_csv(path, float_precision="round_trip")
                continue
            model = load_model(path)
            if truth_data is None:
                truth_data = _truth(config, model, fom_text)
            curves[label] = evaluate_model(model, truth_data, config.train.step_factor, label=label)[0]

    combined, summary = compare(curves)
    out = out or os.path.join(config.output_dir, "compare.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    combined.to_csv(out, index=False, float_format="%.17g")
    summary.to_csv(os.path.splitext(out)[0] + "_summary.csv", index=False, float_format="%.17g")
    click.echo(summary.to_string(index=False))


@main.command()
@click.argument("model_path", type=click.Path())
@_guarded
def inspect(model_path):
    """Print model metadata and stability diagnostics."""
    model = load_model(model_path)
    d = model_diagnostics(model)
    click.echo(f"method: {d['method']}")
    click.echo(f"dimensions: n={d['n']} r={d['r']} m={d['m']} p={d['p']}")
    for key, value in sorted(model.info.items()):
        click.echo(f"{key}: {value}")
    click.echo("eigenvalues of A:")
    for lam in d["eigenvalues"]:
        click.echo(f"  {lam.real:+.10e} {lam.imag:+.10e}j")
    click.echo(f"spectral abscissa: {d['spectral_abscissa']:.10e}")
    click.echo(f"cond(Psi^T Phi): {d['cond_psi_phi']:.6e}")
    if "cond_Q_tilde" in d:
        click.echo(f"sigma_min(R): {d['sigma_min_R']:.6e}")
        click.echo(f"cond(Q~): {d['cond_Q_tilde']:.6e}")
        click.echo(f"energy rate spot check: max linear {d['max_linear_rate']:.6e}, "
                   f"max |quadratic| {d['max_quadratic_rate']:.3e}")


if __name__ == "__main__":
    main()
