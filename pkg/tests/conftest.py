import pytest
import torch

from phgmm.backbone import BackboneConfig
from phgmm.latent import LatentConfig
from phgmm.model import ModelConfig

torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(
        num_classes=3,
        backbone=BackboneConfig(depth_scale=4, units=(1, 1, 1, 1)),
        latent=LatentConfig(
            num_components=3, latent_dim=6, global_dim=5, component_depth=4, global_depth=4, fused_depth=8
        ),
        decoder_units=(1, 1, 1, 1),
    )


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one result line per acceptance criterion for the terminal summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
