"""JSON schemas for every structured file the command line reads or writes."""

from __future__ import annotations

import jsonschema

_number = {"type": "number"}
_nullable_number = {"type": ["number", "null"]}
_vec2 = {"type": "array", "items": _number, "minItems": 2, "maxItems": 2}
_vec3 = {"type": "array", "items": _number, "minItems": 3, "maxItems": 3}
_matrix = {"type": "array", "items": {"type": "array", "items": _nullable_number}}

SCENARIO = {
    "type": "object",
    "properties": {
        "water": {
            "type": "object",
            "properties": {
                "temperature_c": _number, "salinity_ppt": _number, "depth_m": _number,
                "c": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "devices": {
            "type": "array",
            "minItems": 2,
            "items": {
                "type": "object",
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "position": _vec3,
                    "depth": _number,
                    "clock_ppm": _number,
                    "range_set": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                },
                "required": ["id", "position"],
                "additionalProperties": False,
            },
        },
        "leader_heading": _vec2,
        "channel": {
            "type": "object",
            "properties": {
                "taps": {"type": "array", "items": {"type": "array", "items": _number, "minItems": 2, "maxItems": 2}},
                "noise_std": {"type": "number", "minimum": 0},
                "synth": {"type": "object"},
            },
            "additionalProperties": False,
        },
        "environment": {
            "type": "object",
            "properties": {
                "max_range_m": {"type": "number", "exclusiveMinimum": 0},
                "link_loss": {"type": "number", "minimum": 0, "maximum": 1},
                "jitter_s": {"type": "number", "minimum": 0},
                "quantize": {"type": "boolean"},
                "mic_separation": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "protocol": {
            "type": "object",
            "properties": {k: {"type": "number", "exclusiveMinimum": 0}
                           for k in ("delta0", "delta1", "t_packet", "t_guard")},
            "additionalProperties": False,
        },
        "sweep": {"type": "object"},
    },
    "additionalProperties": False,
}

PROBLEM = {
    "type": "object",
    "properties": {
        "D": _matrix,
        "W": {"type": "array", "items": {"type": "array", "items": {"enum": [0, 1]}}},
        "depths": {"type": "array", "items": _number},
        "leader_heading": _vec2,
        "flip_evidence": {
            "type": "object",
            "patternProperties": {"^[0-9]+$": _vec2},
            "additionalProperties": False,
        },
    },
    "required": ["D", "W", "depths"],
    "additionalProperties": False,
}

_link = {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2}

SOLUTION = {
    "type": "object",
    "properties": {
        "positions": {"type": "array", "items": _vec3},
        "stress_m": _number,
        "dropped_links": {"type": "array", "items": _link},
        "clamped_links": {"type": "array", "items": _link},
        "flip_vote": {"type": "integer"},
        "flip_confident": {"type": "boolean"},
        "realizable": {"type": "boolean"},
        "error": {"type": ["string", "null"]},
    },
    "required": ["positions", "stress_m", "dropped_links", "flip_vote", "realizable"],
    "additionalProperties": False,
}

EVENT_LOG = {
    "type": "object",
    "properties": {
        "seed": {"type": "integer"},
        "fidelity": {"enum": ["timestamp", "audio"]},
        "round_time_s": _number,
        "completion_s": _number,
        "silent": {"type": "array", "items": {"type": "integer"}},
        "events": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "time_s": _number,
                    "kind": {"enum": ["tx", "rx", "sync", "drop", "miss"]},
                    "sender": {"type": "integer"},
                    "receiver": {"type": "integer"},
                    "local_time_s": _number,
                    "note": {"type": "string"},
                },
                "required": ["time_s", "kind", "sender"],
                "additionalProperties": False,
            },
        },
        "logs": {
            "type": "object",
            "patternProperties": {
                "^[0-9]+$": {
                    "type": "object",
                    "properties": {
                        "sync_source": {"type": ["integer", "null"]},
                        "times": {"type": "object", "patternProperties": {"^[0-9]+$": _number},
                                  "additionalProperties": False},
                    },
                    "required": ["sync_source", "times"],
                },
            },
            "additionalProperties": False,
        },
    },
    "required": ["seed", "fidelity", "round_time_s", "completion_s", "silent", "events", "logs"],
    "additionalProperties": False,
}

DETECTION_REPORT = {
    "type": "object",
    "properties": {
        "detected": {"type": "boolean"},
        "fs": _number,
        "channels": {"type": "integer", "minimum": 1},
        "offset": {"type": "integer"},
        "score": _number,
        "window_start": {"type": "integer"},
        "direct_path": {
            "type": "object",
            "properties": {"n": {"type": "integer"}, "m": {"type": "integer"}, "tau_los": _number,
                           "arrival": _number},
            "required": ["n", "m", "tau_los", "arrival"],
        },
        "noise_floor": {"type": "array", "items": _number},
        "error": {"type": "string"},
    },
    "required": ["detected", "fs", "channels"],
    "additionalProperties": False,
}

DISTANCE_MATRIX = {
    "type": "array",
    "minItems": 1,
    "items": {"type": "array", "items": {"type": ["number", "null"]}},
}

SWEEP_ROWS = {
    "type": "array",
    "items": {
        "type": "object",
        "properties": {
            "param": _number,
            "mean_error_m": {"type": "number", "minimum": 0},
            "std_error_m": {"type": "number", "minimum": 0},
            "trials": {"type": "integer", "minimum": 1},
        },
        "required": ["param", "mean_error_m", "std_error_m", "trials"],
        "additionalProperties": False,
    },
}

CHANNEL_TAPS = {
    "type": "array",
    "minItems": 1,
    "items": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0, "maximum": 1.000001}},
}


def validate(document, schema) -> None:
    """Raise ``jsonschema.ValidationError`` if ``document`` does not match."""
    jsonschema.validate(document, schema)
