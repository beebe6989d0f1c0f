"""Run configuration: a small sectioned ``key = value`` format.

Example::

    # desk-scale Lotka-Volterra run
    [run]
    command = train
    seed = 0

    [model]
    type = lv
    n_patches = 2
    param_seed = 4

    [train]
    q = 10
    hidden = 128, 128

Keys may also be written with a dotted prefix outside any section
(``model.type = lv``). Lists are comma separated. Every key is checked against
a schema; unknown keys, missing required keys and malformed values raise
:class:`ConfigError` naming the offending line.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import BoundCheckSpec
from .dynamics import BCCParams, DatasetSpec, LVParams
from .network import CONSTRAINT_MODES
from .training import METHODS, TrainConfig

COMMANDS = ("simulate", "train", "predict", "evaluate", "verify", "report")
REQUIRED = object()


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- #
# value types
# --------------------------------------------------------------------------- #


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _opt(conv):
    def parse(s: str):
        return None if s.lower() in ("none", "") else conv(s)
    parse.optional = True
    return parse


def _list(conv):
    def parse(s: str):
        return tuple(conv(p.strip()) for p in s.split(",") if p.strip())
    parse.is_list = True
    return parse


def _choice(*options):
    def parse(s: str):
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return s
    return parse


def _path(s: str) -> str:
    return s


INTS, FLOATS, STRS = _list(int), _list(float), _list(str)

SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "command": (_choice(*COMMANDS), REQUIRED),
        "seed": (int, 0),
    },
    "model": {
        "type": (_choice("lv", "bcc"), REQUIRED),
        "param_seed": (int, 0),
        "tau": (_opt(float), None),
        # Lotka-Volterra
        "n_patches": (int, 2),
        "a_range": (FLOATS, (0.0, 5.0)),
        "b_range": (FLOATS, (0.0, 5.0)),
        "c_range": (FLOATS, (0.0, 5.0)),
        "a": (_opt(FLOATS), None),
        "b": (_opt(FLOATS), None),
        "c": (_opt(FLOATS), None),
        # biochemical circuit
        "n_enzymes": (int, 9),
        "alpha_range": (FLOATS, (0.0, 10.0)),
        "alpha": (_opt(FLOATS), None),
        "K": (float, 8.0),
        "p_exp": (int, 10),
    },
    "data": {
        "n_trajectories": (int, 20),
        "horizon": (int, 5000),
        "init_low": (float, 0.0),
        "init_high": (float, 1.0),
        "seed": (int, 1),
        "test_trajectories": (int, 5),
        "test_seed": (int, 100_000),
    },
    "train": {
        "method": (_choice(*METHODS), "mono_lyap"),
        "q": (int, 1),
        "hidden": (INTS, (2000, 2000)),
        "epochs": (int, 400_000),
        "batch": (int, 500),
        "lr_f": (float, 1e-4),
        "lr_v": (float, 1e-5),
        "decay_rate": (float, 0.98),
        "decay_interval": (int, 250),
        "weight_decay": (float, 0.01),
        "decay_style": (_choice("decoupled", "l2"), "decoupled"),
        "constraint_mode": (_opt(_choice(*CONSTRAINT_MODES)), None),
        "batch_norm": (_opt(_bool), None),
        "min_fraction": (float, 0.5),
        "v_hidden": (_opt(INTS), None),
        "v_constraint_mode": (_choice(*CONSTRAINT_MODES), "none"),
        "update_order": (_choice("v_first", "f_first"), "v_first"),
        "equilibrium": (_opt(FLOATS), None),
        "replace": (_bool, True),
        "standardize": (_bool, True),
    },
    "eval": {
        "horizons": (INTS, (1500, 2500, 3500)),
        "methods": (STRS, ("mono_lyap", "mono_only", "baseline")),
        "windows": (_opt(INTS), None),
        "seeds": (INTS, (0,)),
        "scan_pairs": (int, 10_000),
    },
    "verify": {
        "presets": (STRS, ("lemma2", "lemma2_a0", "theorem1", "theorem1_q1",
                           "window_q100", "window_q1")),
        "trials": (int, 100_000),
    },
    "paths": {
        "out": (_path, "results"),
        "checkpoint": (_opt(_path), None),
        "v_checkpoint": (_opt(_path), None),
        "pred": (_opt(_path), None),
        "truth": (_opt(_path), None),
    },
}

# Monte-Carlo presets for the verify command; all keep b / q <= 0.25 where q > 1.
BOUND_PRESETS: dict[str, tuple[str, dict]] = {
    "lemma2": ("lemma2", dict(a=1.0, epsilon=0.3, T=5)),
    "lemma2_a0": ("lemma2", dict(a=0.0, epsilon=0.3, T=5)),
    "theorem1": ("theorem1", dict(a=0.8, b=1.0, epsilon=0.3, q=10, T=50)),
    "theorem1_q1": ("theorem1", dict(a=0.25, b=0.25, epsilon=0.3, q=1, T=20)),
    "window_q100": ("window", dict(q=100, b=1.0, epsilon=0.1, a=1.0, T=1, expect=True)),
    "window_q1": ("window", dict(q=1, b=1.0, epsilon=0.0, a=1.0, T=1, expect=False)),
}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


# --------------------------------------------------------------------------- #
# RunConfig
# --------------------------------------------------------------------------- #


@dataclass
class RunConfig:
    """Validated configuration; ``values[section][key]`` holds every setting."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        for section, keys in SCHEMA.items():
            sec = self.values.setdefault(section, {})
            for key, (_, default) in keys.items():
                if key not in sec:
                    if default is REQUIRED:
                        raise ConfigError(f"missing required key {section}.{key}")
                    sec[key] = default
        self._validate()

    # convenience accessors
    @property
    def command(self) -> str:
        return self.values["run"]["command"]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def horizons(self) -> tuple:
        return self.values["eval"]["horizons"]

    @property
    def paths(self) -> dict:
        return self.values["paths"]

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "RunConfig":
        vals = {s: dict(v) for s, v in self.values.items()}
        if seed is not None:
            vals["run"]["seed"] = int(seed)
        if out is not None:
            vals["paths"]["out"] = str(out)
        return RunConfig(vals)

    def _validate(self):
        h = self.horizons
        if not h or any(x <= 0 for x in h) or any(b <= a for a, b in zip(h, h[1:])):
            raise ConfigError("eval.horizons must be positive and strictly increasing")
        for m in self.values["eval"]["methods"]:
            if m not in METHODS:
                raise ConfigError(f"eval.methods: unknown method {m!r}")
        for preset in self.values["verify"]["presets"]:
            if preset not in BOUND_PRESETS:
                raise ConfigError(f"verify.presets: unknown preset {preset!r}")
        try:
            self.build_model()
            self.train_config()
            self.dataset_spec()
            self.test_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # builders
    def build_model(self):
        """LVParams or BCCParams described by the ``[model]`` section."""
        m = self.values["model"]
        if m["type"] == "lv":
            n = m["n_patches"]
            tau = 0.0005 if m["tau"] is None else m["tau"]
            if all(m[k] is not None for k in ("a", "b", "c")):
                for k, size in (("a", n * n * 2), ("b", n * 2), ("c", n * 2)):
                    if len(m[k]) != size:
                        raise ConfigError(f"model.{k} needs {size} values, got {len(m[k])}")
                return LVParams(n, np.array(m["a"]), np.array(m["b"]), np.array(m["c"]), tau=tau)
            if any(m[k] is not None for k in ("a", "b", "c")):
                raise ConfigError("model.a, model.b and model.c must be given together")
            return LVParams.random(n, m["param_seed"], a_range=m["a_range"], b_range=m["b_range"],
                                   c_range=m["c_range"], tau=tau)
        n = m["n_enzymes"]
        if m["alpha"] is not None:
            if len(m["alpha"]) != n:
                raise ConfigError(f"model.alpha needs {n} values, got {len(m['alpha'])}")
            return BCCParams(n, np.array(m["alpha"]), K=m["K"], p_exp=m["p_exp"], tau=m["tau"])
        return BCCParams.random(n, m["param_seed"], alpha_range=m["alpha_range"], K=m["K"],
                                p_exp=m["p_exp"], tau=m["tau"])

    def train_config(self, **overrides) -> TrainConfig:
        kw = dict(self.values["train"])
        kw["seed"] = self.seed
        kw.update(overrides)
        return TrainConfig(**kw)

    def dataset_spec(self) -> DatasetSpec:
        d = self.values["data"]
        return DatasetSpec(d["n_trajectories"], d["horizon"], d["init_low"], d["init_high"], d["seed"])

    def test_spec(self) -> DatasetSpec:
        """Held-out trajectories; their seed must differ from the training seed."""
        d = self.values["data"]
        if d["test_seed"] == d["seed"]:
            raise ConfigError("data.test_seed must differ from data.seed")
        horizon = max(d["horizon"], self.values["eval"]["horizons"][-1] + self.values["train"]["q"])
        return DatasetSpec(d["test_trajectories"], horizon, d["init_low"], d["init_high"], d["test_seed"])

    def bound_specs(self) -> list[tuple[str, str, dict]]:
        out = []
        for name in self.values["verify"]["presets"]:
            kind, kw = BOUND_PRESETS[name]
            out.append((name, kind, dict(kw)))
        return out


def parse_config(text: str) -> RunConfig:
    """Parse the sectioned ``key = value`` format into a validated :class:`RunConfig`."""
    values: dict[str, dict] = {}
    seen: dict[str, int] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if "." in key:
            sec, key = key.split(".", 1)
        elif section is None:
            raise ConfigError(f"line {lineno}: key {key!r} outside any section")
        else:
            sec = section
        full = f"{sec}.{key}"
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError(f"line {lineno}: unknown key {full}")
        if full in seen:
            raise ConfigError(f"line {lineno}: duplicate key {full} (first set on line {seen[full]})")
        seen[full] = lineno
        conv = SCHEMA[sec][key][0]
        try:
            values.setdefault(sec, {})[key] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {full}: {exc}") from None
    return RunConfig(values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def serialize_config(cfg: RunConfig) -> str:
    """Text that :func:`parse_config` maps back to an equal configuration."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_format(cfg.values[section][key])}")
        lines.append("")
    return "\n".join(lines)


def model_config_text(params) -> str:
    """``[model]`` section pinning every parameter of ``params`` explicitly."""
    if isinstance(params, LVParams):
        rows = [("type", "lv"), ("n_patches", params.n_patches), ("tau", params.tau),
                ("a", tuple(float(v) for v in params.a.ravel())),
                ("b", tuple(float(v) for v in params.b.ravel())),
                ("c", tuple(float(v) for v in params.c.ravel()))]
    elif isinstance(params, BCCParams):
        rows = [("type", "bcc"), ("n_enzymes", params.n_enzymes), ("tau", params.tau),
                ("alpha", tuple(float(v) for v in params.alpha)), ("K", float(params.K)),
                ("p_exp", params.p_exp)]
    else:
        raise TypeError(f"cannot serialize {type(params).__name__}")
    return "[model]\n" + "".join(f"{k} = {_format(v)}\n" for k, v in rows)


def bound_check_spec(kw: dict, trials: int, seed: int) -> BoundCheckSpec:
    return BoundCheckSpec(trials=trials, seed=seed, **{k: v for k, v in kw.items() if k != "expect"})
