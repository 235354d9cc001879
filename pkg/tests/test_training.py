import pytest

from gradcheck import check_group_gradients, gradient_fixture, tiny_samples
from zsad3d.errors import ConfigurationError
from zsad3d.model import PARAMETER_GROUPS, STAGE_TRAINABLE, Detector
from zsad3d.training import JsonLog, StageConfig, check_classes, evaluate, train_stage1, train_stage2


def test_stage_config_partition(tiny_config):
    for stage in (1, 2):
        sc = StageConfig.from_experiment(tiny_config, stage)
        assert set(sc.trainable_groups) == set(STAGE_TRAINABLE[stage])
        assert set(sc.trainable_groups) | set(sc.frozen_groups) == set(PARAMETER_GROUPS)
        assert not set(sc.trainable_groups) & set(sc.frozen_groups)
    with pytest.raises(ConfigurationError):
        StageConfig(3, 1, 0.1, 1, 0)
    with pytest.raises(ConfigurationError):
        StageConfig(1, 1, 0.1, 1, 0, trainable_groups=["srm"], frozen_groups=["srm"])
    with pytest.raises(ConfigurationError):
        StageConfig(1, 1, 0.0, 1, 0)


def test_check_classes(tiny_config):
    samples = tiny_samples(tiny_config)
    check_classes(samples)
    with pytest.raises(ConfigurationError):
        check_classes(samples[:1])


def test_freeze_ledger_and_updates(tiny_config):
    samples = tiny_samples(tiny_config)
    model = Detector(tiny_config)
    before = model.checksums()
    r1 = train_stage1(model, samples, sink=JsonLog())
    after1 = model.checksums()
    for g in PARAMETER_GROUPS:
        changed = after1[g] != before[g]
        assert changed == (g in STAGE_TRAINABLE[1]) or (g == "defect_distiller" and not changed), g
    assert all(entry[g] == before[g] for entry in r1["ledger"] for g in r1["frozen"])
    r2 = train_stage2(model, samples)
    after2 = model.checksums()
    for g in PARAMETER_GROUPS:
        assert (after2[g] != after1[g]) == (g in STAGE_TRAINABLE[2]), g
    assert all(entry[g] == after1[g] for entry in r2["ledger"] for g in r2["frozen"])


def test_training_is_deterministic(tiny_config):
    samples = tiny_samples(tiny_config)
    sums = []
    for _ in range(2):
        model = Detector(tiny_config)
        train_stage1(model, samples)
        train_stage2(model, samples)
        sums.append(model.checksums())
    assert sums[0] == sums[1]


def test_evaluate_rejects_seen_categories(tiny_config):
    from zsad3d.errors import ProtocolViolation

    samples = tiny_samples(tiny_config)
    with pytest.raises(ProtocolViolation):
        evaluate(Detector(tiny_config), samples, ["sphere"])


@pytest.fixture(scope="module")
def gradient_setup():
    return gradient_fixture()


@pytest.mark.parametrize("group", STAGE_TRAINABLE[1])
def test_stage1_gradients(gradient_setup, group):
    cfg, model, samples = gradient_setup
    check_group_gradients(model, samples, cfg, 1, group)


@pytest.mark.parametrize("group", STAGE_TRAINABLE[2])
def test_stage2_gradients(gradient_setup, group):
    cfg, model, samples = gradient_setup
    check_group_gradients(model, samples, cfg, 2, group)
