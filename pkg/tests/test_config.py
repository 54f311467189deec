import json
import os
from typing import Dict

import pytest
from pytest import Testdir

from blocksim.autoscaler import ProvisionKind
from blocksim.errors import InvalidConfig
from blocksim.harness.config import apply_overrides, load_config, parse_config
from blocksim.scheduler import PolicyKind

CONFIGS_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def minimal() -> Dict:
    return {"workload": {"seed": 1, "qps": 2.0}}


def test_minimal_config_uses_defaults() -> None:
    config = parse_config(minimal())

    assert config.cluster.instances == 8
    assert config.cluster.instance.total_blocks == 1056
    assert config.scheduler.policy is PolicyKind.block
    assert config.provision.kind is ProvisionKind.static
    assert config.policies == [PolicyKind.block]
    assert config.seeds == [1] and config.sweep_qps == [2.0]


@pytest.mark.parametrize("name", ["reference.json", "cold_start.json"])
def test_shipped_configs_load(name: str) -> None:
    config = load_config(os.path.join(CONFIGS_DIR, name))

    assert config.cluster.instance.chunk_budget == 512


def test_reference_config_sweeps_every_policy() -> None:
    config = load_config(os.path.join(CONFIGS_DIR, "reference.json"))

    assert set(config.policies) == set(PolicyKind)
    assert config.seeds == [1, 2, 3, 4, 5]


def test_load_config_fails_on_missing_file(testdir: Testdir) -> None:
    with pytest.raises(InvalidConfig) as exc_info:
        load_config(str(testdir.tmpdir.join("absent.json")))

    assert exc_info.value.field == "config"


def test_load_config_fails_on_invalid_json(testdir: Testdir) -> None:
    file = testdir.makefile(".json", "{not json")

    with pytest.raises(InvalidConfig) as exc_info:
        load_config(str(file))

    assert exc_info.value.field == "config"


@pytest.mark.parametrize(
    "data, field",
    [
        ({}, "workload"),
        ({"workload": {"seed": 1, "qps": -1}}, "workload.qps"),
        ({"workload": {"seed": 1}, "cluster": {"instances": 0}}, "cluster.instances"),
        ({"workload": {"seed": 1}, "probe": {"probability": 2}}, "probe.probability"),
        ({"workload": {"seed": 1}, "scheduler": {"metric": "tokens"}}, "scheduler.metric"),
        (
            {"workload": {"seed": 1}, "cluster": {"instance": {"chunk_budget": 8}}},
            "chunk_budget",
        ),
    ],
)
def test_invalid_config_names_the_field(data: Dict, field: str) -> None:
    with pytest.raises(InvalidConfig) as exc_info:
        parse_config(data)

    assert exc_info.value.field == field


def test_random_policy_requires_scheduler_seed() -> None:
    data = {**minimal(), "sweep": {"policies": ["Random", "BlockPredictive"]}}

    with pytest.raises(InvalidConfig):
        parse_config(data)


def test_autoscaled_cluster_must_fit_max_instances() -> None:
    data = {
        **minimal(),
        "cluster": {"instances": 8},
        "provision": {"kind": "Preempt", "max_instances": 4},
    }

    with pytest.raises(InvalidConfig):
        parse_config(data)


def test_provision_keys_carry_units() -> None:
    data = {
        **minimal(),
        "provision": {
            "kind": "Relief",
            "threshold_s": 50.0,
            "cold_start_s": 20.0,
            "cooldown_s": 5.0,
            "max_instances": 12,
        },
    }

    provision = parse_config(data).provision

    assert provision.kind is ProvisionKind.relief
    assert (provision.threshold_s, provision.cold_start_s, provision.cooldown_s) == (
        50.0,
        20.0,
        5.0,
    )


def test_unknown_provision_key_is_rejected() -> None:
    data = {**minimal(), "provision": {"kind": "Preempt", "threshold": 50.0}}

    with pytest.raises(InvalidConfig) as exc_info:
        parse_config(data)

    assert exc_info.value.field == "provision.threshold"


def test_trace_path_is_resolved_against_config_dir(testdir: Testdir) -> None:
    testdir.makefile(".jsonl", trace='{"id": 0, "prompt_tokens": 1, "output_tokens": 1}')
    config_dir = testdir.mkdir("configs")
    config_file = config_dir.join("experiment.json")
    config_file.write(json.dumps({"workload": {"seed": 1, "trace": "../trace.jsonl"}}))

    config = load_config(str(config_file))

    assert config.workload.trace is not None
    assert os.path.samefile(config.workload.trace, str(testdir.tmpdir.join("trace.jsonl")))


def test_missing_trace_is_rejected(testdir: Testdir) -> None:
    config_file = testdir.makefile(
        ".json", json.dumps({"workload": {"seed": 1, "trace": "absent.jsonl"}})
    )

    with pytest.raises(InvalidConfig) as exc_info:
        load_config(str(config_file))

    assert exc_info.value.field == "workload.trace"


def test_overrides_replace_sweep_lists() -> None:
    config = parse_config(
        {
            **minimal(),
            "sweep": {"policies": ["MinQpm", "LlumnixMinus"], "seeds": [1, 2], "qps": [3.0]},
        }
    )

    overridden = apply_overrides(config, seed=9, policy="RoundRobin", qps=5.0, out="elsewhere")

    assert overridden.policies == [PolicyKind.round_robin]
    assert overridden.seeds == [9]
    assert overridden.workload.qps == 5.0 and overridden.output_dir == "elsewhere"
    assert overridden.sweep_qps == [3.0]


def test_overrides_are_revalidated() -> None:
    config = parse_config(minimal())

    with pytest.raises(InvalidConfig):
        apply_overrides(config, policy="Random")
    with pytest.raises(InvalidConfig):
        apply_overrides(config, qps=-1.0)


def test_no_overrides_return_the_same_config() -> None:
    config = parse_config(minimal())

    assert apply_overrides(config) is config
