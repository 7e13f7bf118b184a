"""Command-line front end: run inference, generate initial sets, score output.

Configuration is a TOML document with sections mirroring the module configs.
A run emits five artifacts into the output directory: the posterior JSON
(schema-versioned, with the transform spec embedded), a posterior sample
CSV, an ELBO report, run diagnostics, and the evaluation log.
"""

import argparse
import json
import math
import os
import select
import subprocess
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, metrics
from .dataset import Dataset, IngestError, ingest
from .loop import LoopConfig, run
from .targets import (
    EvaluationError,
    TargetHandle,
    builtin_target,
    noisy_wrap,
    optimizer_init,
    slice_sampler_init,
)
from .transforms import DimSpec, ParamSpace, unbounded_space
from .variational import MixturePosterior, sample

POSTERIOR_SCHEMA = "sparsebq-posterior/1"

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class ConfigError(ValueError):
    """Bad or inconsistent run configuration."""


class SubprocessTarget:
    """Black-box target spoken to over a line protocol.

    One request per evaluation: ``EVAL x1 ... xD\\n``; the child answers
    ``y\\n`` or ``y sigma_obs\\n``. ``QUIT\\n`` ends the session. A missing,
    late, or malformed reply is an evaluation failure, which the inference
    loop skips (consuming budget).
    """

    def __init__(self, command, dim, timeout=300.0):
        self.command = command
        self.dim = dim
        self.timeout = timeout
        self.proc = None

    def _ensure_started(self):
        if self.proc is None or self.proc.poll() is not None:
            self.proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )

    def _read_line(self):
        ready, _, _ = select.select([self.proc.stdout], [], [], self.timeout)
        if not ready:
            raise EvaluationError(f"no reply within {self.timeout} s")
        line = self.proc.stdout.readline()
        if not line:
            raise EvaluationError("child closed its output")
        return line.strip()

    def __call__(self, x):
        self._ensure_started()
        request = "EVAL " + " ".join(repr(float(v)) for v in x) + "\n"
        try:
            self.proc.stdin.write(request)
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise EvaluationError(f"cannot write to child: {exc}")
        reply = self._read_line()
        parts = reply.split()
        try:
            if len(parts) == 1:
                return float(parts[0])
            if len(parts) == 2:
                return float(parts[0]), float(parts[1])
        except ValueError:
            pass
        raise EvaluationError(f"malformed reply: {reply!r}")

    def close(self):
        if self.proc is not None and self.proc.poll() is None:
            try:
                self.proc.stdin.write("QUIT\n")
                self.proc.stdin.flush()
            except (BrokenPipeError, OSError):
                pass
            try:
                self.proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                self.proc.kill()


def subprocess_target(command, dim, timeout=300.0, plausible_lo=None, plausible_hi=None):
    """Target handle around a child process speaking the line protocol."""
    child = SubprocessTarget(command, dim, timeout)
    handle = TargetHandle(
        dim=dim,
        fn=child,
        name="subprocess",
        plausible_lo=plausible_lo,
        plausible_hi=plausible_hi,
        concurrency_safe=False,
    )
    handle.close = child.close
    return handle


def load_config(path):
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config {path}: {exc}")


def _build_space(doc, target):
    spec = doc.get("space")
    if spec is None:
        return unbounded_space(target.dim)
    kinds = spec.get("kinds")
    if kinds is None or len(kinds) != target.dim:
        raise ConfigError("[space] kinds must list one entry per dimension")
    lower = spec.get("lower", [-math.inf] * target.dim)
    upper = spec.get("upper", [math.inf] * target.dim)
    p_lo = spec.get("plausible_lo", [None] * target.dim)
    p_hi = spec.get("plausible_hi", [None] * target.dim)
    return ParamSpace(
        DimSpec(
            kind=kinds[j],
            lower=float(lower[j]),
            upper=float(upper[j]),
            plausible_lo=p_lo[j],
            plausible_hi=p_hi[j],
        )
        for j in range(target.dim)
    )


def _build_target(doc, seed):
    spec = doc.get("target")
    if not spec:
        raise ConfigError("missing [target] section")
    if ("builtin" in spec) == ("command" in spec):
        raise ConfigError("[target] needs exactly one of 'builtin' or 'command'")
    if "builtin" in spec:
        params = {
            k: v
            for k, v in spec.items()
            if k not in ("builtin", "noise_sd", "noise_seed", "command", "timeout")
        }
        target = builtin_target(spec["builtin"], **params)
    else:
        if "dim" not in spec:
            raise ConfigError("[target] command targets need 'dim'")
        target = subprocess_target(
            spec["command"],
            int(spec["dim"]),
            timeout=float(spec.get("timeout", 300.0)),
            plausible_lo=spec.get("plausible_lo"),
            plausible_hi=spec.get("plausible_hi"),
        )
    noise_sd = float(spec.get("noise_sd", 0.0))
    if noise_sd > 0.0:
        target = noisy_wrap(target, noise_sd, int(spec.get("noise_seed", seed)))
    return target


def _inference_target(target, space):
    """Re-express a target in inference space with the Jacobian correction."""
    fn = target.fn

    def wrapped(u):
        out = fn(space.from_inference(u))
        jac = space.log_jacobian(u)
        if isinstance(out, tuple):
            return out[0] + jac, out[1]
        return out + jac

    p_lo = space.to_inference(target.plausible_lo)
    p_hi = space.to_inference(target.plausible_hi)
    handle = TargetHandle(
        dim=target.dim,
        fn=wrapped,
        exact=target.exact,
        name=target.name,
        plausible_lo=np.minimum(p_lo, p_hi),
        plausible_hi=np.maximum(p_lo, p_hi),
        sigma_obs_sd=target.sigma_obs_sd,
        true_lml=target.true_lml,
        concurrency_safe=target.concurrency_safe,
    )
    handle._rng = target._rng
    return handle


def _build_initial(doc, target_inf, space, seed):
    spec = doc.get("init")
    if not spec:
        raise ConfigError("missing [init] section")
    if "file" in spec:
        path = spec["file"]
        if not os.path.exists(path):
            raise ConfigError(f"initial-evaluation file not found: {path}")
        try:
            ds = ingest(path)
        except IngestError as exc:
            raise ConfigError(f"cannot ingest {path}: {exc}")
        if ds.dim != target_inf.dim:
            raise ConfigError(
                f"initial set dimension {ds.dim} != target dimension {target_inf.dim}"
            )
        # file coordinates are in the original space
        u = space.to_inference(ds.x)
        jac = space.log_jacobian(u)
        return Dataset(u, ds.y + jac, ds.sigma_obs_sq)
    gen = spec.get("generator")
    budget = int(spec.get("budget", 1000))
    gen_seed = int(spec.get("seed", seed))
    if gen == "slice_sampler":
        return slice_sampler_init(
            target_inf, int(spec.get("n_chains", 4)), budget, gen_seed
        )
    if gen == "optimizer":
        return optimizer_init(target_inf, int(spec.get("n_runs", 10)), budget, gen_seed)
    raise ConfigError("[init] needs 'file' or generator in {slice_sampler, optimizer}")


def _build_loop_config(doc, seed):
    base = LoopConfig().to_dict()
    sections = ("trim", "noise_shaping", "inducing", "acquisition")
    for key, val in dict(doc.get("loop", {})).items():
        if key not in base or key in sections:
            raise ConfigError(f"unknown [loop] key {key!r}")
        base[key] = val
    for sec in sections:
        for key, val in dict(doc.get(sec, {})).items():
            if key not in base[sec]:
                raise ConfigError(f"unknown [{sec}] key {key!r}")
            base[sec][key] = val
    base["seed"] = seed
    return LoopConfig.from_dict(base)


def _posterior_payload(result, space, cfg, target):
    q = result.posterior.to_dict()
    return {
        "schema": POSTERIOR_SCHEMA,
        "version": __version__,
        "target": target.name,
        "seed": cfg.seed,
        "transform": space.to_dict(),
        "elbo": {
            "mean": result.elbo.mean,
            "sd": result.elbo.sd,
            "n_mc_entropy": result.elbo.n_mc_entropy,
        },
        **q,
    }


def _write_samples_csv(path, samples):
    dim = samples.shape[1]
    header = ",".join(f"x{j + 1}" for j in range(dim))
    np.savetxt(path, samples, delimiter=",", header=header, comments="", fmt="%.17g")


def cmd_run(config_path, seed=None, out_dir=None, verbose=False):
    doc = load_config(config_path)
    seed = int(doc.get("loop", {}).get("seed", 0)) if seed is None else int(seed)
    out_dir = out_dir or doc.get("output", {}).get("dir", "sparsebq-out")
    os.makedirs(out_dir, exist_ok=True)

    target = _build_target(doc, seed)
    space = _build_space(doc, target)
    target_inf = _inference_target(target, space)
    initial = _build_initial(doc, target_inf, space, seed)
    cfg = _build_loop_config(doc, seed)
    if verbose:
        print(
            f"target={target.name} D={target.dim} initial={initial.n} "
            f"budget={cfg.n_f_budget}",
            file=sys.stderr,
        )
    try:
        result = run(initial, target_inf, cfg)
    finally:
        if hasattr(target, "close"):
            target.close()

    n_samples = int(doc.get("output", {}).get("n_posterior_samples", 100000))
    u_samples = sample(result.posterior, n_samples, seed=cfg.seed + 99)
    x_samples = space.from_inference(u_samples)

    posterior_path = os.path.join(out_dir, "posterior.json")
    with open(posterior_path, "w", encoding="utf-8") as f:
        json.dump(_posterior_payload(result, space, cfg, target), f, sort_keys=True)
    _write_samples_csv(os.path.join(out_dir, "samples.csv"), x_samples)
    elbo_report = {
        "elbo_mean": result.elbo.mean,
        "elbo_sd": result.elbo.sd,
        "n_mc_entropy": result.elbo.n_mc_entropy,
        "true_lml": target.true_lml,
        "delta_lml": (
            None
            if target.true_lml is None
            else metrics.delta_lml(result.elbo.mean, target.true_lml)
        ),
    }
    with open(os.path.join(out_dir, "elbo.json"), "w", encoding="utf-8") as f:
        json.dump(elbo_report, f, sort_keys=True, indent=2)
    with open(os.path.join(out_dir, "diagnostics.json"), "w", encoding="utf-8") as f:
        json.dump(
            {"version": __version__, **result.diagnostics}, f, sort_keys=True, indent=2
        )
    with open(os.path.join(out_dir, "evaluations.csv"), "w", encoding="utf-8") as f:
        dim = target.dim
        cols = ",".join(f"x{j + 1}" for j in range(dim))
        f.write(f"iteration,{cols},y,sigma_obs\n")
        for rec in result.evaluation_log:
            x_orig = space.from_inference(np.array(rec["x"]))
            coords = ",".join(repr(float(v)) for v in np.atleast_1d(x_orig))
            f.write(f"{rec['iteration']},{coords},{rec['y']!r},{rec['sigma_obs']!r}\n")
    if verbose:
        print(f"ELBO {result.elbo.mean:.4f} +- {result.elbo.sd:.4f}", file=sys.stderr)
        print(f"artifacts in {out_dir}", file=sys.stderr)
    return EXIT_OK


def cmd_generate(config_path, seed=None, out_dir=None, verbose=False):
    doc = load_config(config_path)
    init_spec = doc.get("init")
    if not init_spec or "generator" not in init_spec:
        raise ConfigError("[init] must name a generator for 'generate'")
    seed = int(init_spec.get("seed", 0)) if seed is None else int(seed)
    out_dir = out_dir or doc.get("output", {}).get("dir", "sparsebq-out")
    os.makedirs(out_dir, exist_ok=True)
    target = _build_target(doc, seed)
    gen = init_spec["generator"]
    budget = int(init_spec.get("budget", 1000))
    try:
        if gen == "slice_sampler":
            ds = slice_sampler_init(
                target, int(init_spec.get("n_chains", 4)), budget, seed
            )
        elif gen == "optimizer":
            ds = optimizer_init(target, int(init_spec.get("n_runs", 10)), budget, seed)
        else:
            raise ConfigError(f"unknown generator {gen!r}")
    finally:
        if hasattr(target, "close"):
            target.close()
    path = os.path.join(out_dir, init_spec.get("file_name", "initial.csv"))
    with open(path, "w", encoding="utf-8") as f:
        cols = ",".join(f"x{j + 1}" for j in range(ds.dim))
        f.write(f"{cols},y,sigma_obs\n")
        for i in range(ds.n):
            coords = ",".join(repr(float(v)) for v in ds.x[i])
            sd = math.sqrt(float(ds.sigma_obs_sq[i]))
            f.write(f"{coords},{float(ds.y[i])!r},{sd!r}\n")
    if verbose:
        print(f"{ds.n} evaluations -> {path}", file=sys.stderr)
    return EXIT_OK


def _load_posterior(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"posterior file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid posterior JSON {path}: {exc}")
    if payload.get("schema") != POSTERIOR_SCHEMA:
        raise ConfigError(
            f"posterior schema {payload.get('schema')!r} != {POSTERIOR_SCHEMA!r}"
        )
    return payload


def _load_reference_csv(path):
    if not os.path.exists(path):
        raise ConfigError(f"reference sample file not found: {path}")
    data = np.genfromtxt(path, delimiter=",", names=True)
    cols = data.dtype.names
    return np.column_stack([data[c] for c in cols])


def cmd_metrics(posterior_path, reference_path, true_lml=None, n_samples=100000, seed=0):
    payload = _load_posterior(posterior_path)
    q = MixturePosterior.from_dict(payload)
    space = ParamSpace.from_dict(payload["transform"])
    reference = _load_reference_csv(reference_path)
    if reference.shape[1] != q.dim:
        raise ConfigError(
            f"reference dimension {reference.shape[1]} != posterior dimension {q.dim}"
        )
    u = sample(q, n_samples, seed=seed)
    x = space.from_inference(u)
    report = metrics.compute_report(
        reference, x, elbo_mean=payload["elbo"]["mean"], true_lml=true_lml
    )
    print(report.to_table())
    print(report.to_json())
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sparsebq",
        description="Post-process Bayesian inference from recycled log-density evaluations.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run inference from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out-dir", default=None)
    p_run.add_argument("--verbose", action="store_true")

    p_gen = sub.add_parser("generate", help="generate an initial-evaluation file")
    p_gen.add_argument("config")
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--out-dir", default=None)
    p_gen.add_argument("--verbose", action="store_true")

    p_met = sub.add_parser("metrics", help="score a posterior against references")
    p_met.add_argument("--posterior", required=True)
    p_met.add_argument("--reference", required=True)
    p_met.add_argument("--true-lml", type=float, default=None)
    p_met.add_argument("--n-samples", type=int, default=100000)
    p_met.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.seed, args.out_dir, args.verbose)
        if args.command == "generate":
            return cmd_generate(args.config, args.seed, args.out_dir, args.verbose)
        if args.command == "metrics":
            return cmd_metrics(
                args.posterior,
                args.reference,
                args.true_lml,
                args.n_samples,
                args.seed,
            )
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
