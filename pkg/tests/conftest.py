import time

import pytest
import torch

from segadapt.adapters import Method
from segadapt.backbones import build_multiview_unet
from segadapt.data import generate_synthetic
from segadapt.training import TrainConfig, evaluate, finetune_adapter, pretrain

from .cohorts import SOURCE, TARGET, TINY

torch.set_num_threads(1)
torch.use_deterministic_algorithms(True)


_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or report.outcome != "passed":
        n, title = props["criterion"]
        _, ok = _CRITERIA.get(n, (title, True))
        _CRITERIA[n] = (title, ok and report.outcome == "passed")


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            item.user_properties.append(("criterion", tuple(marker.args)))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}")


@pytest.fixture(scope="session")
def tiny_volumes():
    return generate_synthetic(TINY)


@pytest.fixture(scope="session")
def tiny_ckpt(tiny_volumes):
    net = build_multiview_unet(base_channels=4, seed=0)
    return pretrain(net, tiny_volumes, TrainConfig(epochs=2, seed=0, n_views=2))


# Overfit run: pre-train on SOURCE, then fit each rank-8 adapter to TARGET.
# Augmentation is off because the goal is to fit the training set itself.
LEARN_PRETRAIN = TrainConfig(epochs=40, seed=0)
LEARN_FINETUNE = TrainConfig(phase="finetune", epochs=1000, max_steps=200, learning_rate=3e-3, augment=(), seed=0)
LEARN_RANK = 8


@pytest.fixture(scope="session")
def learnability():
    t0 = time.process_time()
    target = generate_synthetic(TARGET)
    base = pretrain(build_multiview_unet(base_channels=8, seed=0), generate_synthetic(SOURCE), LEARN_PRETRAIN)
    out = {"target": target, "base": base, "adapters": {}, "reports": {}, "steps": {}}
    out["baseline"] = evaluate(base.build(), target, contrast_seed=None)
    for m in Method:
        steps = []
        ack = finetune_adapter(base, target, m, LEARN_RANK, LEARN_FINETUNE, on_step=lambda s, l: steps.append(s))
        out["adapters"][m] = ack
        out["steps"][m] = len(steps)
        out["reports"][m] = evaluate(ack.attach(base), target, contrast_seed=None)
    out["cpu_s"] = time.process_time() - t0
    return out
