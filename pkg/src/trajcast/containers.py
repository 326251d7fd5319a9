"""Tagged text containers.

Every artifact file starts with a one-line format tag (e.g. ``trajcast-ds/1``)
followed by a single JSON document. Readers reject files whose tag does not
match what they expect, so a model file can never be mistaken for a dataset.
JSON is emitted with sorted keys and no float formatting tricks, which makes
writes byte-reproducible for identical payloads.
"""

from __future__ import annotations

import json
import os

from .errors import FormatError

DATASET_TAG = "trajcast-ds/1"
GROUND_TRUTH_TAG = "trajcast-gt/1"
PARAMS_TAG = "trajcast-params/1"
MODEL_TAG = "trajcast-model/1"
ENSEMBLE_TAG = "trajcast-ens/1"


def dumps(tag: str, payload: dict) -> str:
    return tag + "\n" + json.dumps(payload, sort_keys=True) + "\n"


def write_container(path: str | os.PathLike, tag: str, payload: dict) -> None:
    text = dumps(tag, payload)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def sniff_tag(path: str | os.PathLike) -> str:
    """Return the first line of a container file without parsing the body."""
    with open(path, "r", encoding="utf-8") as fh:
        return fh.readline().rstrip("\n")


def read_container(path: str | os.PathLike, expected_tag: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        tag = fh.readline().rstrip("\n")
        if tag != expected_tag:
            raise FormatError(
                f"{path}: expected format tag {expected_tag!r}, found {tag!r}"
            )
        try:
            return json.loads(fh.read())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: corrupt container body: {exc}") from exc
