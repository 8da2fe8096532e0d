import numpy as np
import pytest

from pocketdex import synthetic, trainer
from pocketdex.autograd import Tensor
from pocketdex.encoder import DualEncoder
from pocketdex.errors import TrainingDivergedError
from pocketdex.objective import drugclip_loss, similarity_matrix
from pocketdex.trainer import (
    OptState,
    PairDataset,
    PairRecord,
    TrainConfig,
    apply_update,
    evaluate_loss,
    finite_difference_check,
    fit,
    gradient_check,
    parse_train_config,
    train_step,
)


@pytest.fixture(scope="module")
def data():
    return synthetic.random_dataset(6, seed=4)


@pytest.fixture(scope="module")
def model(small_config):
    return DualEncoder.initialize(small_config, seed=0)


def same_params(a: DualEncoder, b: DualEncoder) -> bool:
    return all(
        np.array_equal(a.tower(t)[k], b.tower(t)[k]) for t in ("pocket", "molecule") for k in a.tower(t).tensors
    )


# -- config -------------------------------------------------
def test_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.optimizer, cfg.beta1, cfg.beta2, cfg.adam_eps) == (1e-3, 16, "adam", 0.9, 0.999, 1e-8)


@pytest.mark.parametrize(
    "kwargs", [dict(batch_size=1), dict(lr=-1.0), dict(optimizer="rmsprop"), dict(temperature=0.0), dict(epochs=-1)]
)
def test_config_rejects(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_parse_config_text():
    cfg = parse_train_config("# run\nlr = 0.01\nbatch-size=4\nconformer_noise = yes  # jitter\nmetric = dot\n", epochs=3)
    assert (cfg.lr, cfg.batch_size, cfg.conformer_noise, cfg.metric, cfg.epochs) == (0.01, 4, True, "dot", 3)
    assert parse_train_config(trainer.format_train_config(cfg)) == cfg


@pytest.mark.parametrize("text", ["lr 0.1", "colour = red", "epochs = many"])
def test_parse_config_errors(text):
    with pytest.raises(ValueError):
        parse_train_config(text)


def test_duplicate_pair_ids_rejected(data):
    r = data[0]
    with pytest.raises(ValueError, match="duplicate"):
        PairDataset([r, PairRecord(r.pocket, r.molecule, r.pair_id)])


def test_pair_manifest(tmp_path):
    (tmp_path / "p.xyz").write_text("2\n\nC 0 0 0\nN 1.5 0 0\n")
    (tmp_path / "m.csv").write_text("element,x,y,z\nO,0,0,0\nC,1.2,0,0\n")
    (tmp_path / "pairs.csv").write_text("id,pocket,molecule\n# comment\na,p.xyz,m.csv\nb,p.xyz,m.csv\n")
    ds = trainer.read_pair_manifest(tmp_path / "pairs.csv")
    assert ds.ids == ["a", "b"]
    assert ds[0].pocket.n_atoms == 2
    (tmp_path / "dup.csv").write_text("id,pocket,molecule\na,p.xyz,m.csv\na,p.xyz,m.csv\n")
    with pytest.raises(ValueError):
        trainer.read_pair_manifest(tmp_path / "dup.csv")


# -- steps -------------------------------------------------
def test_zero_lr_leaves_params_unchanged(data, model):
    for opt in ("sgd", "adam"):
        new, _, _ = train_step(list(data), model, TrainConfig(lr=0.0, optimizer=opt))
        assert same_params(new, model)


def test_sgd_step_decreases_loss(data, model):
    cfg = TrainConfig(lr=1e-3, optimizer="sgd")
    batch = list(data)
    before = evaluate_loss(model, batch, cfg).total
    new, _, br = train_step(batch, model, cfg)
    assert br.total == pytest.approx(before, abs=1e-12)
    assert evaluate_loss(new, batch, cfg).total < before


def test_adam_zero_gradient_is_a_no_op(model):
    grads = {f"{t}.{k}": np.zeros_like(model.tower(t)[k]) for t in ("pocket", "molecule") for k in model.tower(t).trainable()}
    new, state = apply_update(model, grads, TrainConfig(lr=0.1), OptState())
    assert same_params(new, model) and state.step == 1


def test_frozen_basis_never_moves(data, model):
    new, _, _ = train_step(list(data), model, TrainConfig(lr=0.1))
    np.testing.assert_array_equal(new.pocket["pair.centers"], model.pocket["pair.centers"])
    assert not np.array_equal(new.pocket["pair.weight"], model.pocket["pair.weight"])


def test_single_pair_batch_rejected(data, model):
    with pytest.raises(ValueError):
        train_step([data[0]], model, TrainConfig())


def test_all_components_reported(data, model):
    cfg = TrainConfig(topk_weight=0.1, masked_weight=0.5, denoise_weight=0.5, topk_k=2)
    br = evaluate_loss(model, list(data), cfg)
    expected = br.contrastive - 0.1 * br.topk + 0.5 * br.masked + 0.5 * br.denoise
    assert br.total == pytest.approx(expected, rel=1e-12)
    assert br.masked > 0 and br.denoise > 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_term(data, model):
    with pytest.raises(TrainingDivergedError) as exc:
        train_step(list(data), model, TrainConfig(temperature=1e-320))
    assert exc.value.term == "contrastive"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_divergence_keeps_last_good(data, small_config):
    with pytest.raises(TrainingDivergedError) as exc:
        fit(data, TrainConfig(epochs=2, batch_size=3, temperature=1e-320), config=small_config)
    assert isinstance(exc.value.last_good, trainer.FitResult)


def test_held_out_loss_ignores_batch_order(data, model):
    cfg = TrainConfig()
    batch = list(data)
    order = [3, 0, 5, 1, 4, 2]
    a = evaluate_loss(model, batch, cfg).contrastive
    b = evaluate_loss(model, [batch[i] for i in order], cfg).contrastive
    assert a == pytest.approx(b, rel=1e-12)


# -- gradients -------------------------------------------------
def test_identity_encoder_gradient_closed_form(rng):
    P, M = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    tau = 0.5

    def loss(t):
        return drugclip_loss(similarity_matrix(t["p"], t["m"], "dot"), tau)

    assert finite_difference_check(loss, {"p": P, "m": M}, eps=1e-5, sample=12) <= 1e-7
    S = P @ M.T / tau
    rows = np.exp(S - S.max(axis=1, keepdims=True))
    rows /= rows.sum(axis=1, keepdims=True)
    cols = np.exp(S - S.max(axis=0, keepdims=True))
    cols /= cols.sum(axis=0, keepdims=True)
    G = (rows + cols - 2 * np.eye(3)) / (2 * 3 * tau)
    tp, tm = Tensor(P, requires_grad=True), Tensor(M, requires_grad=True)
    loss({"p": tp, "m": tm}).backward()
    np.testing.assert_allclose(tp.grad, G @ M, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(tm.grad, G.T @ P, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("component", trainer.COMPONENTS)
def test_gradient_check_each_component(data, model, component):
    cfg = TrainConfig(topk_weight=1.0, masked_weight=1.0, denoise_weight=1.0, topk_k=2)
    assert gradient_check(model, list(data)[:3], cfg, sample=16, component=component) <= 1e-4


def test_gradient_check_rejects_zero_eps(data, model):
    with pytest.raises(ValueError):
        gradient_check(model, list(data), TrainConfig(), eps=0.0)


# -- fit -------------------------------------------------
def test_zero_epochs_returns_initial(data, model):
    result = fit(data, TrainConfig(epochs=0, batch_size=3), init=model)
    assert result.history == [] and result.model is model


def test_fit_is_deterministic(data, small_config):
    cfg = TrainConfig(epochs=2, batch_size=3, seed=5)
    a = fit(data, cfg, config=small_config)
    b = fit(data, cfg, config=small_config)
    assert a.history == b.history
    assert same_params(a.model, b.model)


def test_fit_needs_a_full_batch(data, small_config):
    with pytest.raises(ValueError, match="batch_size"):
        fit(data, TrainConfig(batch_size=7), config=small_config)


def test_fit_keeps_best_validation_epoch(data, small_config):
    val = synthetic.random_dataset(4, seed=9)
    result = fit(data, TrainConfig(epochs=3, batch_size=3), validation=val, config=small_config)
    scores = [row["val_bedroc"] for row in result.history]
    assert result.best_epoch == int(np.argmax(scores)) + 1
    assert trainer.validation_bedroc(result.model, val, TrainConfig()) == pytest.approx(max(scores))


def test_stop_when_ends_early(data, small_config):
    result = fit(data, TrainConfig(epochs=5, batch_size=3), config=small_config, stop_when=lambda row, m: row["epoch"] == 2)
    assert len(result.history) == 2 and result.best_epoch == 2


def test_history_csv(data, small_config):
    result = fit(data, TrainConfig(epochs=1, batch_size=3), config=small_config)
    text = trainer.history_csv(result.history, header="seed=0")
    lines = text.splitlines()
    assert lines[0] == "# seed=0"
    assert lines[1] == ",".join(trainer.HISTORY_COLUMNS)
    assert lines[2].startswith("1,")


def test_batches_cover_everything():
    batches = trainer.make_batches(7, 3, np.random.default_rng(0))
    assert sorted(np.concatenate(batches).tolist()) == list(range(7))
    assert min(len(b) for b in batches) >= 2
