from typing import Callable, Optional

import pytest

from blocksim.core import InstanceConfig, Request

# Enable testdir fixture (https://docs.pytest.org/en/7.1.x/reference/reference.html#testdir)
pytest_plugins = "pytester"

RequestFactory = Callable[..., Request]


@pytest.fixture()
def instance_config() -> InstanceConfig:
    return InstanceConfig()


@pytest.fixture()
def small_config() -> InstanceConfig:
    """Four blocks of 16 tokens: two short requests collide quickly"""
    return InstanceConfig(total_blocks=4, block_size=16, max_batch_size=8, chunk_budget=64)


@pytest.fixture()
def make_request() -> RequestFactory:
    def factory(
        id: int,
        prompt_tokens: int = 100,
        output_tokens: int = 3,
        estimated_output_tokens: Optional[int] = None,
        arrival_time: float = 0.0,
    ) -> Request:
        return Request(
            id=id,
            prompt_tokens=prompt_tokens,
            true_output_tokens=output_tokens,
            estimated_output_tokens=estimated_output_tokens or output_tokens,
            arrival_time=arrival_time,
            dispatch_time=arrival_time,
        )

    return factory
