"""Building priors from run configuration.

A prior specification is a dict such as::

    {"kind": "beta-binomial", "a": 1, "b": 1,
     "decorators": [{"kind": "weighted", "weights": [...], "boost": 2, "boosted": [3, 7]}]}

Predictor indices in configuration are 1-based, matching the file outputs.
On the command line the short form ``kind[:arg,arg,...]`` is accepted, e.g.
``beta-binomial:1,1``, ``uniform-size:100``, ``dilution:0.9``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from .bayes import CoefficientPrior
from .errors import ConfigError, DataError, DomainError
from .models import ModelVector
from .priors import (
    ConditionalSelection, PfsPrior, WeightedSelection, beta_binomial_pfs, beta_binomial_size_prior,
    block_rule, dilution_prior, interaction_rule, pathway_rule, pfs_from_distribution,
    size_prior_to_h, size_vector_pfs, symmetric_pfs,
)

PRIOR_KINDS = ("beta-binomial", "size-vector", "symmetric", "uniform-size", "dilution", "tabulated")


def parse_prior_spec(text: str) -> dict:
    """Short command-line form to a specification dict."""
    kind, _, rest = text.partition(":")
    kind = kind.strip()
    args = [a for a in rest.split(",") if a.strip()] if rest else []
    try:
        nums = [float(a) for a in args]
    except ValueError:
        nums = None
    if kind == "beta-binomial":
        if nums is None or len(nums) not in (0, 2):
            raise ConfigError("beta-binomial takes two numbers, e.g. beta-binomial:1,1")
        return {"kind": kind, "a": nums[0] if nums else 1.0, "b": nums[1] if nums else 1.0}
    if kind in ("size-vector", "symmetric"):
        if not nums:
            raise ConfigError(f"{kind} needs the size probabilities q_0,...,q_p")
        return {"kind": kind, "q": nums}
    if kind == "uniform-size":
        if nums is None or len(nums) > 1:
            raise ConfigError("uniform-size takes at most one number (the largest size)")
        return {"kind": kind, "max_size": int(nums[0])} if nums else {"kind": kind}
    if kind == "dilution":
        if nums is None or len(nums) > 1:
            raise ConfigError("dilution takes at most one number (the threshold)")
        return {"kind": kind, "threshold": nums[0] if nums else 0.9}
    if kind == "tabulated":
        if not rest:
            raise ConfigError("tabulated needs a CSV file of model,probability rows")
        return {"kind": kind, "file": rest}
    raise ConfigError(f"unknown prior kind {kind!r}; expected one of {', '.join(PRIOR_KINDS)}")


def parse_coef_prior(text: Optional[str], n: int) -> CoefficientPrior:
    """``g``, ``g:<value>``, ``hyper-g`` or ``hyper-g:<a>``; ``g`` defaults to ``n``."""
    if text is None or text == "g":
        return CoefficientPrior.g_prior(n)
    kind, _, arg = text.partition(":")
    try:
        if kind in ("g", "g-prior"):
            return CoefficientPrior.g_prior(float(arg) if arg else n)
        if kind == "hyper-g":
            return CoefficientPrior.hyper_g(float(arg) if arg else 3.0)
    except ValueError:
        raise ConfigError(f"bad coefficient prior {text!r}") from None
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    raise ConfigError(f"unknown coefficient prior {text!r}; use g[:value] or hyper-g[:a]")


def coef_prior_from_dict(spec: Optional[dict], n: int) -> CoefficientPrior:
    if spec is None:
        return CoefficientPrior.g_prior(n)
    kind = spec.get("kind", "g")
    if kind in ("g", "g-prior"):
        return CoefficientPrior.g_prior(spec.get("g", n))
    if kind == "hyper-g":
        return CoefficientPrior.hyper_g(spec.get("a", 3.0))
    raise ConfigError(f"unknown coefficient prior kind {kind!r}")


def _size_part(spec: dict, p: int) -> np.ndarray:
    """Size distribution for a spec (used as the stopping rule)."""
    kind = spec["kind"]
    if kind in ("beta-binomial", "dilution"):
        return beta_binomial_size_prior(p, spec.get("a", 1.0), spec.get("b", 1.0))
    if kind == "uniform-size":
        top = int(spec.get("max_size", p))
        if not 0 <= top <= p:
            raise ConfigError(f"max_size {top} outside 0..{p}")
        q = np.zeros(p + 1)
        q[:top + 1] = 1.0 / (top + 1)
        return q
    q = np.asarray(spec["q"], dtype=float)
    if q.size != p + 1:
        raise ConfigError(f"size distribution has {q.size} entries; expected p+1 = {p + 1}")
    return q


def build_prior(spec: dict, p: int, X: Optional[np.ndarray] = None, max_size: Optional[int] = None) -> PfsPrior:
    """A prior from its specification, capped at ``max_size`` when given."""
    kind = spec.get("kind")
    try:
        if kind == "beta-binomial":
            prior = beta_binomial_pfs(p, spec.get("a", 1.0), spec.get("b", 1.0))
        elif kind == "symmetric":
            prior = symmetric_pfs(_size_part(spec, p))
        elif kind in ("size-vector", "uniform-size"):
            prior = size_vector_pfs(_size_part(spec, p))
        elif kind == "dilution":
            if X is None:
                raise ConfigError("dilution prior needs the design matrix")
            with np.errstate(invalid="ignore"):
                corr = np.corrcoef(np.asarray(X, dtype=float), rowvar=False)
            corr = np.nan_to_num(np.atleast_2d(corr))
            np.fill_diagonal(corr, 1.0)
            selection = dilution_prior(corr, spec.get("threshold", 0.9))
            prior = PfsPrior(size_prior_to_h(_size_part(spec, p)), selection, None, "dilution")
        elif kind == "tabulated":
            prior = pfs_from_distribution(read_model_table(spec["file"], p))
        else:
            raise ConfigError(f"unknown prior kind {kind!r}")
        prior = apply_decorators(prior, spec.get("decorators", []))
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    if prior.p != p:
        raise ConfigError(f"prior has p={prior.p} but the data have p={p}")
    if max_size is not None:
        prior = prior.capped(max_size)
    return prior


def _zero_based(indices, p: int, what: str) -> list:
    out = []
    for j in indices:
        j = int(j)
        if not 1 <= j <= p:
            raise ConfigError(f"{what} index {j} outside 1..{p}")
        out.append(j - 1)
    return out


def apply_decorators(prior: PfsPrior, decorators) -> PfsPrior:
    p = prior.p
    stopping, selection = prior.stopping, prior.selection
    for dec in decorators:
        kind = dec.get("kind")
        if kind == "weighted":
            weights = dec.get("weights", [1.0] * p)
            if len(weights) != p:
                raise ConfigError(f"weighted decorator needs {p} weights")
            selection = WeightedSelection(weights, dec.get("boost", 1.0),
                                          _zero_based(dec.get("boosted", []), p, "boosted"))
        elif kind == "conditional":
            rule = pathway_rule(_zero_based(dec["triggers"], p, "trigger"),
                                _zero_based([dec["target"]], p, "target")[0], dec.get("factor", 1.0))
            selection = ConditionalSelection(selection, [rule])
        elif kind == "interaction":
            rule = interaction_rule(_zero_based(dec["parents"], p, "parent"),
                                    _zero_based([dec["target"]], p, "target")[0])
            selection = ConditionalSelection(selection, [rule])
        elif kind == "block":
            blocks = [_zero_based(b, p, "block") for b in dec["blocks"]]
            stopping, selection = block_rule(stopping, selection, blocks)
        else:
            raise ConfigError(f"unknown decorator {kind!r}")
    if not decorators:
        return prior
    return replace(prior, stopping=stopping, selection=selection, size_distribution=None,
                   name=prior.name + "+" + "+".join(d["kind"] for d in decorators))


def read_model_table(path, p: int) -> np.ndarray:
    """CSV of ``model,probability`` rows (model as a 0/1 string) to a table by mask."""
    table = np.zeros(1 << p)
    try:
        fh = Path(path).open(newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        rows = csv.reader(fh)
        next(rows, None)
        for rownum, row in enumerate(rows, start=2):
            if not row:
                continue
            try:
                model = ModelVector.from_string(row[0].strip())
                prob = float(row[1])
            except (DomainError, ValueError, IndexError):
                raise DataError("bad model table entry", row=rownum) from None
            if model.p != p:
                raise DataError(f"model string has length {model.p}, expected {p}", row=rownum)
            table[model.mask] += prob
    return table


def load_config(path) -> dict:
    """Read a JSON run configuration."""
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
