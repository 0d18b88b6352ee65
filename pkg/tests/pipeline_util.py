"""Run a loopback pipeline on threads for tests."""

import threading

from edgepipe.attention import LocalRunner
from edgepipe.model import build_model
from edgepipe.partition import specs_from_sizes
from edgepipe.pipeline import Stage, StageCost
from edgepipe.transport import loopback_pair


def run_pipeline(cfg, sizes, batches, lr, runner=None, cost=StageCost(), model=None):
    """Train ``len(batches)`` batches through stages of the given block counts; returns (model, stages)."""
    model = model or build_model(cfg)
    specs = specs_from_sizes(sizes)
    links = [loopback_pair() for _ in range(len(specs) - 1)]
    stages = []
    for s, spec in enumerate(specs):
        up = links[s - 1][1] if s > 0 else None
        down = links[s][0] if s < len(specs) - 1 else None
        stages.append(Stage(spec, cfg, model.params, runner or LocalRunner(), lr, cost, up=up, down=down, recv_timeout=30))
    errors = []

    def go(stage):
        try:
            stage.run(len(batches), iter(batches) if stage.spec.is_first else None)
        except Exception as exc:  # surfaced below
            errors.append(exc)
            for a, b in links:
                a.close()

    threads = [threading.Thread(target=go, args=(st,)) for st in stages]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return model, stages


def all_events(stages):
    return [e for st in stages for e in st.result.events]
