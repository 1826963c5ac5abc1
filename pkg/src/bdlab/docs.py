"""Text documents for tasks, backdoor specs and configs.

Documents are JSON.  Every float is written as its shortest round-trip
decimal string (``repr``), so ``load(dump(x))`` reproduces ``x`` bit for
bit.  Keys:

``inputs``               list of coordinate lists
``prior``                list of decimal strings
``conditional``          list of rows of decimal strings
``trigger``              list of ``[x, A(x)]`` pairs
``target``               integer label
``beta``                 decimal string
``target_conditional``   object mapping input index -> row of decimal strings
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .task import BackdoorSpec, FiniteTask, TriggerMap

FORMAT_VERSION = 1


def _dec(x) -> str:
    return repr(float(x))


def _undec(s) -> float:
    return float(s)


def task_to_dict(task: FiniteTask, spec: BackdoorSpec | None = None) -> dict:
    doc = {
        "version": FORMAT_VERSION,
        "inputs": [[_dec(c) for c in row] for row in task.coords],
        "prior": [_dec(p) for p in task.prior],
        "conditional": [[_dec(p) for p in row] for row in task.conditional],
    }
    if spec is not None:
        doc["trigger"] = [[x, ax] for x, ax in sorted(spec.trigger.mapping.items())]
        doc["target"] = int(spec.target)
        doc["beta"] = _dec(spec.beta)
        doc["target_conditional"] = {
            str(x): [_dec(p) for p in row]
            for x, row in sorted(spec.target_conditional.items())
        }
    return doc


def task_from_dict(doc: dict):
    """Parse a document into ``(FiniteTask, BackdoorSpec | None)``."""
    task = FiniteTask(
        coords=np.array([[_undec(c) for c in row] for row in doc["inputs"]]),
        prior=np.array([_undec(p) for p in doc["prior"]]),
        conditional=np.array([[_undec(p) for p in row] for row in doc["conditional"]]),
    )
    spec = None
    if "trigger" in doc:
        spec = BackdoorSpec(
            trigger=TriggerMap({int(x): int(ax) for x, ax in doc["trigger"]}),
            target=int(doc["target"]),
            beta=_undec(doc["beta"]),
            target_conditional={
                int(x): np.array([_undec(p) for p in row])
                for x, row in doc["target_conditional"].items()
            },
        )
    return task, spec


def dumps_task(task: FiniteTask, spec: BackdoorSpec | None = None) -> str:
    return json.dumps(task_to_dict(task, spec), indent=1, sort_keys=True) + "\n"


def loads_task(text: str):
    return task_from_dict(json.loads(text))


def save_task(path, task, spec=None) -> None:
    Path(path).write_text(dumps_task(task, spec))


def load_task(path):
    return loads_task(Path(path).read_text())


def load_config(path) -> dict:
    """Read the shared JSON config document (empty dict when ``path`` is None)."""
    if path is None:
        return {}
    return json.loads(Path(path).read_text())
