from __future__ import annotations

from typing import Sequence

import pytest

from nnsplit.modelgraph import (
    LayerKind,
    LayerSpec,
    ModelGraph,
    ToyConfig,
    build_toy_convtasnet,
    load_fixture,
    profile,
)

TOY_TEXT = "C=2,N=4,L=4,S=8,T=64"


def chain_graph(
    params: Sequence[int],
    channels: Sequence[int] | None = None,
    *,
    frames: int = 10,
    macs: Sequence[int] | None = None,
    skips: Sequence[tuple[int, int]] = (),
) -> ModelGraph:
    """Frame-preserving pointwise chain with chosen params and output channels."""
    channels = channels or [1] * len(params)
    macs = macs or params
    layers = tuple(
        LayerSpec(i, LayerKind.POINTWISE, p, m, c) for i, (p, c, m) in enumerate(zip(params, channels, macs))
    )
    return ModelGraph(layers, tuple(skips), frames, 1)


def chain_profile(params, channels=None, **kw):
    return profile(chain_graph(params, channels, **kw))


@pytest.fixture(scope="session")
def toy_graph() -> ModelGraph:
    return build_toy_convtasnet(ToyConfig.parse(TOY_TEXT))


@pytest.fixture(scope="session")
def fixture_graph() -> ModelGraph:
    return load_fixture("convtasnet")


@pytest.fixture(scope="session")
def fixture_profile(fixture_graph):
    return profile(fixture_graph)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
