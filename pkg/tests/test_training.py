import numpy as np
import pytest

from capsrec.embeddings import apply_single_update, apply_sparse_update
from capsrec.errors import ConfigError, NumericalError, SequencingError
from capsrec.rng import STREAM_NEGATIVES, STREAM_ROUTING, derive_rng
from capsrec.training import (TrainConfig, apply_updates, build_state,
                              joint_loss, load_train_config, make_buffers,
                              run_aux_pass, run_main_pass, train, train_step)
from tests.conftest import micro_config, micro_dataset


def snapshot(state):
    return {name: arr.copy() for name, arr in state.param_items()}


def assert_bit_equal(a, b):
    assert a.keys() == b.keys()
    for name in a:
        assert np.array_equal(a[name], b[name]), name


def run_one_production_step(delta, seed=5):
    dataset = micro_dataset()
    config = micro_config(optimizer="sgd", delta=delta, seed=seed)
    state, opt = build_state(config, dataset)
    buffers = make_buffers(state)
    rng_routing = derive_rng(seed, STREAM_ROUTING)
    rng_negatives = derive_rng(seed, STREAM_NEGATIVES)
    train_step(state, opt, dataset.train, config, buffers, rng_routing,
               rng_negatives)
    return snapshot(state)


def run_one_oracle_step(select, seed=5, delta_for_config=0.5):
    """Gradient-discarding oracle: never runs the mixing arithmetic.

    select copies the chosen gradient stream into the mixed slot
    directly, so the non-selected stream is discarded by construction.
    """
    dataset = micro_dataset()
    config = micro_config(optimizer="sgd", delta=delta_for_config, seed=seed)
    state, opt = build_state(config, dataset)
    buffers = make_buffers(state)
    rng_routing = derive_rng(seed, STREAM_ROUTING)
    rng_negatives = derive_rng(seed, STREAM_NEGATIVES)

    buffers.zero()
    run_main_pass(state, dataset.train, buffers)
    run_aux_pass(state, dataset.train, config, buffers, rng_routing,
                 rng_negatives)
    for grads in (buffers.item, buffers.cat):
        grads.aux_mixed[...] = select(grads)
        grads.mixed = True

    opt.begin_step()
    for name, arr in state.dense_param_items():
        opt.update_dense(name, arr, buffers.dense[name])
    apply_sparse_update(state.encoder.item_table, buffers.item, opt, "item")
    apply_sparse_update(state.encoder.cat_table, buffers.cat, opt, "cat")
    apply_single_update(state.profile_table, buffers.profile, opt, "profile")
    return snapshot(state)


def test_delta_one_matches_discard_auxiliary_oracle():
    production = run_one_production_step(delta=1.0)
    oracle = run_one_oracle_step(lambda g: g.aux_from_main)
    assert_bit_equal(production, oracle)


def test_delta_zero_matches_discard_main_oracle():
    production = run_one_production_step(delta=0.0)
    oracle = run_one_oracle_step(lambda g: g.aux_from_auxiliary)
    assert_bit_equal(production, oracle)


def test_delta_half_matches_hand_combination():
    production = run_one_production_step(delta=0.5)
    oracle = run_one_oracle_step(
        lambda g: 0.5 * g.aux_from_auxiliary + 0.5 * g.aux_from_main)
    assert production.keys() == oracle.keys()
    for name in production:
        assert np.max(np.abs(production[name] - oracle[name])) <= 1e-10, name


def test_lambda_zero_delta_one_equals_aux_off_bit_exact(small_synthetic):
    on = micro_config(lam=0.0, delta=1.0, auxiliary=True, epochs=2,
                      optimizer="adam", batch_size=8, seed=3)
    off = micro_config(lam=0.0, delta=1.0, auxiliary=False, epochs=2,
                       optimizer="adam", batch_size=8, seed=3)
    state_on, _, report_on = train(on, small_synthetic)
    state_off, _, report_off = train(off, small_synthetic)
    assert_bit_equal(snapshot(state_on), snapshot(state_off))
    for a, b in zip(report_on.epochs, report_off.epochs):
        assert a.validation_auc == b.validation_auc
        assert a.main_loss == b.main_loss


def test_train_deterministic(small_synthetic):
    config = micro_config(epochs=2, batch_size=8, seed=11)
    state_a, _, report_a = train(config, small_synthetic)
    state_b, _, report_b = train(config, small_synthetic)
    assert_bit_equal(snapshot(state_a), snapshot(state_b))
    assert report_a.initial_auc == report_b.initial_auc
    for a, b in zip(report_a.epochs, report_b.epochs):
        assert a.total_loss == b.total_loss
        assert a.validation_auc == b.validation_auc


def test_seed_changes_the_run(small_synthetic):
    a, _, _ = train(micro_config(epochs=1, batch_size=8, seed=0), small_synthetic)
    b, _, _ = train(micro_config(epochs=1, batch_size=8, seed=1), small_synthetic)
    same = all(np.array_equal(x, y) for (_, x), (_, y)
               in zip(a.param_items(), b.param_items()))
    assert not same


def test_zero_epochs_reports_initial_auc_only(dataset):
    config = micro_config(epochs=0)
    state, _, report = train(config, dataset)
    fresh, _ = build_state(config, dataset)
    assert_bit_equal(snapshot(state), snapshot(fresh))
    assert report.epochs == []
    assert 0.0 <= report.initial_auc <= 1.0
    assert report.final_auc() == report.initial_auc


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_diagnostics(dataset):
    config = micro_config(optimizer="sgd", learning_rate=1e300, epochs=3)
    with pytest.raises(NumericalError):
        train(config, dataset)


def test_losses_decrease_on_learnable_data(small_synthetic):
    config = micro_config(epochs=3, batch_size=8, learning_rate=1e-2,
                          optimizer="adam", seed=2)
    _, _, report = train(config, small_synthetic)
    assert report.epochs[-1].main_loss < report.epochs[0].main_loss


def test_aux_loss_reported_even_when_lambda_zero(small_synthetic):
    config = micro_config(lam=0.0, epochs=1, batch_size=8)
    _, _, report = train(config, small_synthetic)
    assert report.epochs[0].aux_loss > 0.0


def test_joint_loss_decomposition():
    assert joint_loss(0.5, 2.0, 0.25) == pytest.approx(1.0)
    with pytest.raises(NumericalError):
        joint_loss(float("nan"), 1.0, 1.0)
    with pytest.raises(ConfigError):
        joint_loss(1.0, 1.0, -0.5)


def test_mixing_requires_backward_first(dataset):
    config = micro_config()
    state, opt = build_state(config, dataset)
    buffers = make_buffers(state)
    buffers.item.add_main(np.array([1]), np.ones((1, config.d_orig)),
                          np.ones((1, config.d_aux)))
    opt.begin_step()
    with pytest.raises(SequencingError):
        apply_sparse_update(state.encoder.item_table, buffers.item, opt, "item")


def test_apply_updates_runs_the_full_sequence(dataset):
    config = micro_config(optimizer="sgd")
    state, opt = build_state(config, dataset)
    buffers = make_buffers(state)
    buffers.zero()
    run_main_pass(state, dataset.train, buffers)
    before = snapshot(state)
    apply_updates(state, opt, buffers, config.delta)
    after = snapshot(state)
    changed = any(not np.array_equal(before[name], after[name])
                  for name in before)
    assert changed


def test_config_validation():
    with pytest.raises(ConfigError):
        micro_config(delta=1.5).validate()
    with pytest.raises(ConfigError):
        micro_config(lam=-1.0).validate()
    with pytest.raises(ConfigError):
        micro_config(p=0).validate()
    with pytest.raises(ConfigError):
        micro_config(base_model="mlp-mixer").validate()
    with pytest.raises(ConfigError):
        micro_config(k_min=5, k_max=2).validate()
    with pytest.raises(ConfigError):
        micro_config(optimizer="lion").validate()


def test_config_from_mapping_aliases_lambda():
    config = TrainConfig.from_mapping({"base_model": "din", "lambda": "0.25",
                                       "delta": "0.3", "epochs": "2",
                                       "auxiliary": "true"})
    assert config.lam == 0.25
    assert config.delta == 0.3
    assert config.epochs == 2
    assert config.auxiliary is True


def test_config_from_mapping_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"base_model": "din", "dropout": "0.5"})


def test_config_bool_parsing():
    for raw, expected in (("1", True), ("true", True), ("Yes", True),
                          ("on", True), ("0", False), ("false", False),
                          ("No", False), ("off", False)):
        config = TrainConfig.from_mapping({"auxiliary": raw})
        assert config.auxiliary is expected
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"auxiliary": "maybe"})


def test_load_train_config(tmp_path):
    path = tmp_path / "train.conf"
    path.write_text(
        "# experiment setup\n"
        "base_model = din\n"
        "lambda = 1.0\n"
        "delta = 0.3\n"
        "epochs = 2\n"
        "seed = 4\n")
    config = load_train_config(str(path))
    assert config.base_model == "din"
    assert config.lam == 1.0
    assert config.seed == 4


def test_config_copy_overrides():
    config = micro_config(seed=1)
    clone = config.copy(seed=9, delta=0.9)
    assert clone.seed == 9
    assert clone.delta == 0.9
    assert config.seed == 1
    assert clone.base_model == config.base_model


def test_config_round_trip_mapping():
    config = micro_config(seed=6)
    clone = TrainConfig.from_mapping(
        {k: str(v) for k, v in config.to_mapping().items()})
    assert clone == config


def test_main_pass_loss_is_mean_bce(dataset):
    from capsrec.models import bce_loss, forward_logit, sigmoid

    config = micro_config()
    state, _ = build_state(config, dataset)
    buffers = make_buffers(state)
    buffers.zero()
    loss = run_main_pass(state, dataset.train, buffers)
    expected = np.mean([bce_loss(sigmoid(forward_logit(state, s)[0]), s.label)
                        for s in dataset.train])
    assert loss == pytest.approx(expected, rel=1e-12)
