"""CSV schemas, run configuration, and manifests.

All tabular output is CSV with explicit headers; floats are printed with
17 significant digits so that write(read(x)) is byte-identical.  Run
configuration is an INI-style key-value file with nested sections.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError
from .model import (
    Beta,
    InverseUniform,
    KernelSpec,
    KernelVariant,
    ModelParams,
    ModelSpec,
    Normal,
    ObservationModel,
    ShiftedGamma,
    StateConstraints,
    Uniform,
    initial_state_distribution,
)
from .population import Population, validate_covariates
from .util import fmt_float


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    return str(v)


def _read_rows(path, expected_header):
    try:
        with open(path, newline="") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    header = lines[0].split(",")
    if header != list(expected_header):
        raise DataFormatError(
            f"{path}: expected header {','.join(expected_header)!r}, got {lines[0]!r}"
        )
    return [line.split(",") for line in lines[1:] if line]


# ---------------------------------------------------------------------------
# Data matrices
# ---------------------------------------------------------------------------


def write_states_csv(path, states):
    states = np.asarray(states)
    rows = (
        (i, t, int(states[i, t]))
        for i in range(states.shape[0])
        for t in range(states.shape[1])
    )
    _write_rows(path, ("id", "t", "state"), rows)


def read_states_csv(path) -> np.ndarray:
    rows = _read_rows(path, ("id", "t", "state"))
    if not rows:
        raise DataFormatError(f"{path}: no state rows")
    data = np.array([[int(a), int(b), int(c)] for a, b, c in rows])
    n, tp1 = data[:, 0].max() + 1, data[:, 1].max() + 1
    states = np.zeros((n, tp1), dtype=np.int8)
    seen = np.zeros((n, tp1), dtype=bool)
    for i, t, s in data:
        states[i, t] = s
        seen[i, t] = True
    if not seen.all():
        raise DataFormatError(f"{path}: missing (id,t) cells")
    return states


def write_detections_csv(path, y):
    y = np.asarray(y)
    ids, ts = np.nonzero(y)
    order = np.lexsort((ts, ids))
    _write_rows(path, ("id", "t"), ((int(ids[k]), int(ts[k])) for k in order))


def ingest_detections(path, n: int, T: int,
                      observation: ObservationModel = ObservationModel.SINGLE_DETECTION
                      ) -> np.ndarray:
    """Assemble the observation matrix from a detections CSV.

    Individuals absent from the file are undetected.  Errors cite the
    offending data row (1-based, excluding the header).
    """
    rows = _read_rows(path, ("id", "t"))
    y = np.zeros((n, T + 1), dtype=np.int8)
    for k, row in enumerate(rows, start=1):
        if len(row) != 2:
            raise DataFormatError(f"{path}:{k}: expected 'id,t', got {','.join(row)!r}")
        try:
            i, t = int(row[0]), int(row[1])
        except ValueError:
            raise DataFormatError(f"{path}:{k}: non-integer id or t") from None
        if not 0 <= i < n:
            raise DataFormatError(f"{path}:{k}: id {i} outside population of {n}")
        if not 1 <= t <= T:
            raise DataFormatError(f"{path}:{k}: detection time {t} outside 1..{T}")
        if y[i, t]:
            raise DataFormatError(f"{path}:{k}: duplicate detection cell ({i},{t})")
        if observation.single_detection_rows and y[i].any():
            raise DataFormatError(
                f"{path}:{k}: individual {i} already has a detection; "
                f"{observation.value} allows one"
            )
        y[i, t] = 1
    return y


def write_population_csv(path, coords):
    coords = np.asarray(coords, dtype=float)
    _write_rows(path, ("id", "x", "y"),
                ((i, coords[i, 0], coords[i, 1]) for i in range(coords.shape[0])))


def read_population_csv(path) -> np.ndarray:
    rows = _read_rows(path, ("id", "x", "y"))
    if not rows:
        raise DataFormatError(f"{path}: empty population")
    ids = [int(r[0]) for r in rows]
    if sorted(ids) != list(range(len(ids))):
        raise DataFormatError(f"{path}: ids must be 0-based and contiguous")
    coords = np.zeros((len(ids), 2))
    for r in rows:
        coords[int(r[0])] = (float(r[1]), float(r[2]))
    return coords


def write_covariates_csv(path, W):
    W = np.asarray(W)
    _write_rows(path, ("t", "W"), ((t, int(W[t])) for t in range(len(W))))


def read_covariates_csv(path, T: int) -> np.ndarray:
    rows = _read_rows(path, ("t", "W"))
    W = np.zeros(T + 1, dtype=np.int8)
    seen = np.zeros(T + 1, dtype=bool)
    for k, row in enumerate(rows, start=1):
        t, w = int(row[0]), int(row[1])
        if not 0 <= t <= T:
            raise DataFormatError(f"{path}:{k}: t {t} outside 0..{T}")
        if w not in (0, 1):
            raise DataFormatError(f"{path}:{k}: W must be 0/1")
        W[t] = w
        seen[t] = True
    if not seen.all():
        raise DataFormatError(f"{path}: missing covariate rows for some t")
    return W


# ---------------------------------------------------------------------------
# Posterior outputs
# ---------------------------------------------------------------------------


def param_header(names) -> tuple:
    return ("chain", "iteration") + tuple(names)


def write_draws_csv(path, archive):
    names = archive.names
    rows = []
    chains, iters, _ = archive.draws.shape
    for c in range(chains):
        for q in range(iters):
            rows.append((c, q + 1) + tuple(archive.draws[c, q]))
    _write_rows(path, param_header(names), rows)


def read_draws_csv(path):
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty draws file")
    header = lines[0].split(",")
    if header[:2] != ["chain", "iteration"]:
        raise DataFormatError(f"{path}: not a parameter-draw CSV")
    names = header[2:]
    data = np.array([[float(v) for v in line.split(",")] for line in lines[1:] if line])
    chains = int(data[:, 0].max()) + 1
    iters = int(data[:, 1].max())
    draws = np.zeros((chains, iters, len(names)))
    for row in data:
        draws[int(row[0]), int(row[1]) - 1] = row[2:]
    return names, draws


def write_functionals_csv(path, archive):
    rows = []
    for name, per_chain in archive.functionals.items():
        for c, values in enumerate(per_chain):
            for k, v in enumerate(np.asarray(values)):
                q = archive.burn_in + (k + 1) * archive.thin
                rows.append((c, q, name, float(v)))
    rows.sort(key=lambda r: (r[2], r[0], r[1]))
    _write_rows(path, ("chain", "iteration", "name", "value"), rows)


def read_functionals_csv(path):
    rows = _read_rows(path, ("chain", "iteration", "name", "value"))
    out: dict[str, list[float]] = {}
    for _, _, name, value in rows:
        out.setdefault(name, []).append(float(value))
    return {k: np.asarray(v) for k, v in out.items()}


def write_state_probs_csv(path, probabilities):
    probs = np.asarray(probabilities)
    rows = (
        (i, t, probs[i, t, 0], probs[i, t, 1], probs[i, t, 2])
        for i in range(probs.shape[0])
        for t in range(probs.shape[1])
    )
    _write_rows(path, ("id", "t", "p_sus", "p_inf", "p_rem"), rows)


def read_state_probs_csv(path):
    rows = _read_rows(path, ("id", "t", "p_sus", "p_inf", "p_rem"))
    data = np.array([[float(v) for v in r] for r in rows])
    n, tp1 = int(data[:, 0].max()) + 1, int(data[:, 1].max()) + 1
    probs = np.zeros((n, tp1, 3))
    for row in data:
        probs[int(row[0]), int(row[1])] = row[2:]
    return probs


def write_waic_csv(path, rows):
    """rows: iterable of (model_label, WaicResult)."""
    _write_rows(path, ("model", "lppd", "p_waic", "waic"),
                ((label, w.lppd, w.p_waic, w.waic) for label, w in rows))


def write_convergence_csv(path, report):
    _write_rows(path, ("param", "gelman_rubin", "ess", "pass"),
                ((name, gr, ess, ok) for name, gr, ess, ok in report.rows))


def write_summary_csv(path, rows):
    _write_rows(path, ("name", "median", "lo95", "hi95"), rows)


def write_kernel_curve_csv(path, rows):
    _write_rows(path, ("d", "p_median", "p_lo95", "p_hi95"), rows)


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

_KERNELS = {v.value: v for v in KernelVariant}
_OBS = {v.value: v for v in ObservationModel}


def _parse_prior(text: str):
    text = text.strip()
    if text == "inverse_uniform":
        return InverseUniform()
    if "(" not in text or not text.endswith(")"):
        raise ConfigError(f"cannot parse prior {text!r}")
    name, argtext = text[:-1].split("(", 1)
    args = [float(a) for a in argtext.split(",")] if argtext.strip() else []
    name = name.strip().lower()
    try:
        if name == "uniform":
            return Uniform(*args)
        if name == "beta":
            return Beta(*args)
        if name == "shifted_gamma":
            return ShiftedGamma(*args)
        if name == "gamma":
            return ShiftedGamma(args[0], args[1], args[2] if len(args) > 2 else 0.0)
        if name == "normal":
            return Normal(*args)
    except TypeError:
        raise ConfigError(f"wrong argument count in prior {text!r}") from None
    raise ConfigError(f"unknown prior family {name!r}")


def _parse_pairs(text: str) -> dict:
    out = {}
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        key, _, value = chunk.partition(":")
        out[key.strip()] = float(value)
    return out


@dataclass
class RunConfig:
    """Parsed configuration file; sections may be absent when unused."""

    parser: configparser.ConfigParser
    path: str | None = None

    @staticmethod
    def load(path) -> "RunConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        return RunConfig(parser, str(path))

    @staticmethod
    def from_text(text: str) -> "RunConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        parser.read_string(text)
        return RunConfig(parser)

    def _section(self, name, required=False):
        if not self.parser.has_section(name):
            if required:
                raise ConfigError(f"config is missing the [{name}] section")
            return {}
        return dict(self.parser.items(name))

    def population(self, grid_flag: str | None = None,
                   population_path: str | None = None) -> Population:
        """Build the population from the [population] section or flags.

        `grid_flag` is the CLI shorthand rows:cols:row_spacing:col_spacing.
        """
        sec = self._section("population")
        if grid_flag:
            parts = grid_flag.split(":")
            if len(parts) not in (4, 5):
                raise ConfigError("--grid expects rows:cols:row_spacing:col_spacing[:order]")
            rows, cols = int(parts[0]), int(parts[1])
            rsp, csp = float(parts[2]), float(parts[3])
            order = int(parts[4]) if len(parts) == 5 else int(sec.get("order", 3))
            return Population.grid(rows, cols, rsp, csp, order=order)
        if population_path:
            coords = read_population_csv(population_path)
            radius = float(sec.get("radius", 0) or 0)
            if radius <= 0:
                raise ConfigError("CSV populations need a positive [population] radius")
            return Population.from_coords(coords, radius)
        mode = sec.get("mode", "grid")
        if mode == "grid":
            try:
                return Population.grid(
                    int(sec["rows"]), int(sec["cols"]),
                    float(sec.get("row_spacing", 1.0)),
                    float(sec.get("col_spacing", 0.5)),
                    order=int(sec.get("order", 3)),
                )
            except KeyError as exc:
                raise ConfigError(f"[population] grid needs {exc}") from None
        if mode == "complete":
            try:
                return Population.complete(int(sec["n"]))
            except KeyError:
                raise ConfigError("[population] complete needs n") from None
        if mode == "csv":
            coords = read_population_csv(sec["file"])
            return Population.from_coords(coords, float(sec["radius"]))
        raise ConfigError(f"unknown population mode {mode!r}")

    def kernel(self) -> KernelSpec:
        sec = self._section("model", required=True)
        name = sec.get("kernel", "power_law_taylor")
        if name not in _KERNELS:
            raise ConfigError(f"unknown kernel {name!r}")
        return KernelSpec(
            _KERNELS[name],
            anchor=float(sec.get("anchor", 1.35)),
            dmax=float(sec["dmax"]) if "dmax" in sec else None,
            dmin=float(sec["dmin"]) if "dmin" in sec else None,
        )

    def observation(self) -> ObservationModel:
        sec = self._section("model", required=True)
        name = sec.get("observation", "single_detection")
        if name not in _OBS:
            raise ConfigError(f"unknown observation model {name!r}")
        return _OBS[name]

    def priors(self) -> dict:
        return {name: _parse_prior(text) for name, text in self._section("priors").items()}

    def model_spec(self, n: int, T: int, section: str = "model") -> ModelSpec:
        sec = dict(self._section("model", required=True))
        if section != "model":
            sec.update(self._section(section, required=True))
        name = sec.get("kernel", "power_law_taylor")
        if name not in _KERNELS:
            raise ConfigError(f"unknown kernel {name!r}")
        kernel = KernelSpec(
            _KERNELS[name],
            anchor=float(sec.get("anchor", 1.35)),
            dmax=float(sec["dmax"]) if "dmax" in sec else None,
            dmin=float(sec["dmin"]) if "dmin" in sec else None,
        )
        obs_name = sec.get("observation", "single_detection")
        if obs_name not in _OBS:
            raise ConfigError(f"unknown observation model {obs_name!r}")
        init = initial_state_distribution(
            n,
            float(sec.get("init_infectious", 0.01)),
            {int(k): v for k, v in _parse_pairs(sec.get("init_overrides", "")).items()},
        )
        covariates = None
        if sec.get("covariates_file") and not _truthy(sec.get("ignore_covariates", "false")):
            covariates = validate_covariates(
                read_covariates_csv(sec["covariates_file"], T), T)
        constraints = StateConstraints(
            no_undetected_infections=_truthy(sec.get("no_undetected_infections", "false")),
            pin_detected=_truthy(sec.get("pin_detected", "false")),
        )
        return ModelSpec(
            kernel=kernel,
            observation=_OBS[obs_name],
            priors=self.priors(),
            initial=init,
            constraints=constraints,
            covariates=covariates,
            fixed=_parse_pairs(sec.get("fixed", "")),
        )

    def mcmc(self, **overrides):
        from .samplers import MCMCConfig

        sec = self._section("mcmc")
        kwargs = dict(
            iterations=int(sec.get("iterations", 20000)),
            burn_in=int(sec.get("burn_in", 5000)),
            chains=int(sec.get("chains", 3)),
            seed=int(sec.get("seed", 0)),
            thin=int(sec.get("thin", 10)),
            sampler_mode=sec.get("sampler_mode", "default"),
        )
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return MCMCConfig(**kwargs)

    def simulate_params(self) -> tuple[ModelParams, int, int]:
        sec = self._section("simulate", required=True)
        try:
            beta = np.array([float(b) for b in sec["beta"].split(",")])
            params = ModelParams(
                float(sec.get("theta", 1.0)), float(sec["m"]),
                float(sec.get("alpha", 0.0)), beta,
            )
            return params, int(sec["t"]), int(sec.get("seed", 0))
        except KeyError as exc:
            raise ConfigError(f"[simulate] needs {exc}") from None

    def variant_sections(self) -> list[str]:
        return [s for s in self.parser.sections() if s.startswith("variant:")]

    def study(self) -> dict:
        return self._section("study")

    def raw_text(self) -> str:
        if self.path and os.path.exists(self.path):
            with open(self.path) as fh:
                return fh.read()
        import io as _io

        buf = _io.StringIO()
        self.parser.write(buf)
        return buf.getvalue()


def _truthy(text: str) -> bool:
    return str(text).strip().lower() in ("1", "true", "yes", "on")


def write_manifest(path, config_text: str, seed, command: str, extra=None):
    """Reproducibility record: config hash, seed, and library versions."""
    import numba

    manifest = {
        "command": command,
        "seed": int(seed),
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "versions": {
            "hmmilm": _package_version(),
            "numpy": np.__version__,
            "numba": numba.__version__,
        },
    }
    if extra:
        manifest.update(extra)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _package_version() -> str:
    from . import __version__

    return __version__
