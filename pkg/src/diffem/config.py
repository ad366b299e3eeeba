"""Experiment configuration documents for the command line drivers.

Every subcommand takes one JSON object. It is validated against the
subcommand's schema before anything runs, and unknown keys are rejected.
"""
import json
from pathlib import Path

import jsonschema

from diffem import gmm, ot
from diffem.errors import ArgumentError

COMMANDS = ("fit", "flow", "weights-pathology", "barycentre", "projected-barycentre",
            "colour-transfer", "texture", "grad-compare", "sample-complexity", "fixtures",
            "selfcheck")

_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_BOOL = {"type": "boolean"}
_STR = {"type": "string", "minLength": 1}
_SEED = {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


EM_SCHEMA = _obj({"T": _NONNEG_INT, "fix_weights": _BOOL, "update_covariances": _BOOL,
                  "eps_r": _NONNEG})
UNBALANCED_SCHEMA = _obj({"lambda0": _POS, "lambda1": _POS, "entropic_eps": _POS,
                          "max_iter": _POS_INT, "tol": _POS})

COMMON = {"seed": _SEED, "output_dir": _STR, "em": EM_SCHEMA}

FLOW_KEYS = {
    "grad_method": {"enum": ["AD", "AI", "OS", "WARM"]},
    "gd_steps": _NONNEG_INT,
    "learning_rate": _POS,
    "subsample_ratio": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "snapshot_every": _POS_INT,
    "halve_on_increase": _BOOL,
    "optimizer": {"enum": ["gd", "adam"]},
}

SCHEMAS = {
    "fit": _obj({**COMMON, "input": _STR, "K": _POS_INT, "init": _STR}, ["input", "K"]),
    "flow": _obj({**COMMON, **FLOW_KEYS, "problem": {"enum": ["toy", "files"]},
                  "source": _STR, "theta0": _STR, "target": _STR, "target_points": _STR,
                  "K": _POS_INT}),
    "weights-pathology": _obj({**COMMON, **FLOW_KEYS, "uniform": _BOOL,
                               "nu_weights": {"type": "array", "items": _POS,
                                              "minItems": 3, "maxItems": 3},
                               "n": _POS_INT}),
    "barycentre": _obj({**COMMON, **FLOW_KEYS, "targets": {"type": "array", "items": _STR,
                                                           "minItems": 2},
                        "source": _STR, "theta0": _STR, "K": _POS_INT},
                       ["targets", "source"]),
    "projected-barycentre": _obj({**COMMON, **FLOW_KEYS,
                                  "targets": {"type": "array", "items": _STR,
                                              "minItems": 3, "maxItems": 3},
                                  "source": _STR}, ["targets", "source"]),
    "colour-transfer": _obj({**COMMON, "source": _STR, "target": _STR, "K": _POS_INT,
                             "gd_steps": _NONNEG_INT, "learning_rate": _POS,
                             "fit_iterations": _NONNEG_INT,
                             "unbalanced": {"oneOf": [{"type": "null"}, UNBALANCED_SCHEMA]}},
                            ["source", "target"]),
    "texture": _obj({**COMMON, "target": _STR,
                     "out_shape": {"type": "array", "items": _POS_INT, "minItems": 2,
                                   "maxItems": 2},
                     "scales": {"type": "array", "minItems": 1,
                                "items": {"type": "array", "items": _NONNEG_INT,
                                          "minItems": 2, "maxItems": 2}},
                     "K": _POS_INT, "gd_steps": _NONNEG_INT, "lr": _POS,
                     "fit_iterations": _NONNEG_INT, "nn_projection": _BOOL},
                    ["target"]),
    "grad-compare": _obj({**COMMON,
                          "n": {"type": "array", "items": _POS_INT, "minItems": 1},
                          "K": {"type": "array", "items": _POS_INT, "minItems": 1},
                          "T": {"type": "array", "items": _POS_INT, "minItems": 1},
                          "repeats": _POS_INT,
                          "gmms": {"type": "array", "items": _STR, "minItems": 1}}),
    "sample-complexity": _obj({**COMMON,
                               "n_grid": {"type": "array", "items": _POS_INT, "minItems": 1},
                               "repeats": _POS_INT, "iterations": _POS_INT,
                               "separation_scales": {"type": "object",
                                                     "additionalProperties": _POS,
                                                     "minProperties": 1},
                               "mu": _STR, "nu": _STR}),
    "fixtures": _obj({**COMMON,
                      "which": {"type": "array", "minItems": 1, "uniqueItems": True,
                                "items": {"enum": ["e3", "vanishing", "n2"]}},
                      "e3_epsilon": {"type": "number", "exclusiveMinimum": 0,
                                     "exclusiveMaximum": 0.5},
                      "vanishing_epsilons": {"type": "array", "items": _POS, "minItems": 1},
                      "n2_gamma": {"type": "number", "exclusiveMinimum": 0,
                                   "exclusiveMaximum": 1},
                      "n2_starts": _POS_INT, "n2_grid": {"type": "integer", "minimum": 3}}),
    "selfcheck": _obj({**COMMON, "instances": _POS_INT, "rtol": _POS}),
}


def load(path):
    """Read a JSON config file; ArgumentError when it is missing or malformed."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ArgumentError(f"cannot read config file {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"{path}: invalid JSON ({exc})") from None
    return doc


def validate(command, doc):
    if command not in SCHEMAS:
        raise ArgumentError(f"unknown command {command!r}")
    try:
        jsonschema.validate(doc, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ArgumentError(f"invalid {command} config at {where}: {exc.message}") from None
    return doc


def em_config(doc, **defaults):
    """EmConfig from the optional ``em`` block; ``defaults`` fill missing keys."""
    block = doc.get("em", {})
    base = {"T": 10, "fix_weights": False, "update_covariances": True, "eps_r": 0.0}
    base.update(defaults)
    base.update(block)
    return gmm.EmConfig(iterations=base["T"], fix_weights=base["fix_weights"],
                        update_covariances=base["update_covariances"],
                        cov_regulariser=float(base["eps_r"]), seed=int(doc.get("seed", 0)))


def unbalanced_config(block):
    if block is None:
        return None
    return ot.UnbalancedConfig(**block)
