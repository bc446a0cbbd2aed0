"""
Training loop, hyperparameter search, evaluation and datasets - tests
Run: pytest test_training.py
"""

import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).resolve().parent))

import numpy as np
import pandas as pd
import pytest
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import TensorDataset

from common.errors import ConfigurationError, InvalidInputError, MissingInputError, NonFiniteLossError
from models.checkpoints import CheckpointMeta, load_checkpoint_meta
from models.decoder import DecoderConfig, build_decoder
from models.encoder import ClassifierOutput
from reports.templates import load_template_library, render_report
from reports.tokenizer import EOS_ID, PAD_ID, SOS_ID, TokenSequence
from synth.abnormalities import AbnormalitySpec, Lobe, Task
from synth.dataset_builder import build_dataset, collect_phantoms, materialize_dataset
from training.datasets import (
    MINED_LABELS_FILE, ReportDataset, VolumeDataset, load_mined_labels, resolve_task,
)
from training.evaluation import evaluate_encoder, next_word_accuracy, score_reports
from training.search import (
    Dynamics, SearchGrid, TrialOutcome, assess_dynamics, hyperparameter_search,
    load_search_log, next_combination,
)
from training.trainer import TrainConfig, train


@pytest.fixture(scope="module")
def lib():
    return load_template_library()


def toy_data(n=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 4, generator=g)
    y = (x[:, :1] + x[:, 1:2] > 0).float()
    return TensorDataset(x, y)


def toy_loss(model, batch):
    x, y = batch
    return F.binary_cross_entropy_with_logits(model(x), y)


def toy_eval(model, ds):
    x, y = ds.tensors
    with torch.no_grad():
        logits = model(x)
    return {
        "loss": F.binary_cross_entropy_with_logits(logits, y).item(),
        "accuracy": float(((logits > 0).float() == y).float().mean()),
    }


def scripted_eval(losses):
    """Evaluation returning the given validation losses in turn (last one repeated)."""
    calls = []

    def evaluate(model, ds):
        calls.append(1)
        return {"loss": losses[min(len(calls), len(losses)) - 1]}

    return evaluate


def toy_meta():
    return CheckpointMeta(architecture="toy:linear", config_hash="h", step=0, task="toy")


def toy_model(seed=0):
    torch.manual_seed(seed)
    return nn.Linear(4, 1)


def cfg(**changes) -> TrainConfig:
    base = dict(learning_rate=1e-2, batch_size=8, min_steps=20, eval_every=10, seed=3)
    base.update(changes)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# TrainConfig
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("changes", [
    {"learning_rate": 1e-6},
    {"learning_rate": 0.05},
    {"batch_size": 5},
    {"batch_size": 51},
    {"grad_accumulation": 0},
    {"patience": 0},
    {"min_steps": 100, "max_steps": 50},
])
def test_train_config_rejects_out_of_bounds(changes):
    with pytest.raises(ConfigurationError):
        cfg(**changes)


def test_step_limit_defaults_to_three_times_min_steps():
    assert cfg(min_steps=1500).step_limit == 4500
    assert cfg(min_steps=1500, max_steps=2000).step_limit == 2000


def test_with_changes_revalidates():
    with pytest.raises(ConfigurationError):
        cfg().with_changes(learning_rate=1.0)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def test_loss_decreases(tmp_path):
    model = toy_model()
    result = train(model, toy_data(), toy_data(seed=1), cfg(min_steps=200, max_steps=200),
                   toy_loss, toy_eval, tmp_path, "toy", toy_meta())
    assert result.steps == 200
    assert np.mean(result.train_losses[-20:]) < np.mean(result.train_losses[:20])


def test_training_is_deterministic(tmp_path):
    runs = []
    for i in range(2):
        model = toy_model()
        result = train(model, toy_data(), toy_data(seed=1), cfg(max_steps=40),
                       toy_loss, toy_eval, tmp_path / str(i), "toy", toy_meta())
        runs.append((result.train_losses, model.weight.detach().clone()))
    assert runs[0][0] == runs[1][0]
    assert torch.equal(runs[0][1], runs[1][1])


def test_no_early_stop_before_min_steps(tmp_path):
    # flat validation loss: patience is exhausted long before min_steps
    result = train(toy_model(), toy_data(), toy_data(), cfg(min_steps=100, max_steps=300),
                   toy_loss, scripted_eval([1.0]), tmp_path, "toy", toy_meta())
    assert result.stop_reason == "early_stop"
    assert result.steps == 100


def test_runs_to_max_steps_while_improving(tmp_path):
    losses = [1.0 / (k + 1) for k in range(100)]
    result = train(toy_model(), toy_data(), toy_data(), cfg(min_steps=20, max_steps=60),
                   toy_loss, scripted_eval(losses), tmp_path, "toy", toy_meta())
    assert result.stop_reason == "max_steps"
    assert result.steps == 60
    assert result.best_step == 60


def test_best_checkpoint_follows_raw_validation_loss(tmp_path):
    result = train(toy_model(), toy_data(), toy_data(), cfg(min_steps=10, max_steps=60),
                   toy_loss, scripted_eval([3.0, 1.0, 2.0, 2.5, 2.5, 2.5]), tmp_path, "toy", toy_meta())
    assert result.best_step == 20
    meta = load_checkpoint_meta(tmp_path / "toy")
    assert meta.step == 20
    assert meta.metrics["loss"] == 1.0
    assert result.checkpoint == tmp_path / "toy.pt"


def test_history_csv_is_replaced_on_fresh_run(tmp_path):
    for _ in range(2):
        train(toy_model(), toy_data(), toy_data(), cfg(min_steps=10, max_steps=30),
              toy_loss, toy_eval, tmp_path, "toy", toy_meta())
    history = pd.read_csv(tmp_path / "toy.history.csv")
    assert list(history.columns) == ["step", "split", "metric", "value"]
    assert sorted(history["step"].unique()) == [10, 20, 30]
    assert set(history["split"]) == {"train", "val"}
    assert len(history[(history["split"] == "val") & (history["metric"] == "loss")]) == 3


def test_gradient_accumulation_runs(tmp_path):
    result = train(toy_model(), toy_data(), toy_data(), cfg(grad_accumulation=2, max_steps=20),
                   toy_loss, toy_eval, tmp_path, "toy", toy_meta())
    assert len(result.train_losses) == 20


def test_non_finite_loss_aborts_with_snapshot(tmp_path):
    def nan_loss(model, batch):
        return toy_loss(model, batch) * float("nan")

    with pytest.raises(NonFiniteLossError) as err:
        train(toy_model(), toy_data(), toy_data(), cfg(), nan_loss, toy_eval, tmp_path, "toy", toy_meta())
    assert err.value.exit_code == 6
    assert (tmp_path / "toy.nonfinite.pt").exists()


# ---------------------------------------------------------------------------
# Training dynamics
# ---------------------------------------------------------------------------

def _jitter(n, scale=1e-3, seed=0):
    return np.random.default_rng(seed).normal(0, scale, n)


def test_smooth_decreasing_loss_is_healthy():
    x = np.arange(100)
    dyn = assess_dynamics(np.exp(-x / 40) + 0.5 + _jitter(100))
    assert not dyn.diverged and not dyn.noisy
    assert dyn.slope < 0


def test_increasing_loss_is_divergence():
    dyn = assess_dynamics(1.0 + 0.01 * np.arange(100) + _jitter(100))
    assert dyn.diverged


def test_non_finite_loss_is_divergence():
    assert assess_dynamics([1.0, 0.9, float("nan")]).diverged
    assert assess_dynamics([]).diverged


def test_oscillating_loss_is_noisy():
    losses = 1.0 + 0.5 * (-1.0) ** np.arange(100)
    dyn = assess_dynamics(losses)
    assert dyn.noisy and not dyn.diverged


def test_short_history_is_inconclusive():
    dyn = assess_dynamics([1.0, 2.0, 3.0])
    assert not dyn.diverged and not dyn.noisy


def _dyn(diverged=False, noisy=False):
    return Dynamics(diverged, noisy, None, None, None)


def test_next_combination_rules():
    base = cfg(learning_rate=1e-3, batch_size=25)
    assert next_combination(base, _dyn(diverged=True), set())[0].learning_rate == pytest.approx(5e-4)
    assert next_combination(base, _dyn(noisy=True), set())[0].batch_size == 50
    up, action = next_combination(base, _dyn(), set())
    assert up.learning_rate == pytest.approx(2e-3) and action == "double_lr"


def test_next_combination_clamps_and_skips_tried():
    top = cfg(learning_rate=1e-2, batch_size=50)
    nxt, action = next_combination(top, _dyn(noisy=True), {(1e-2, 50)})
    assert nxt.batch_size == 50
    assert nxt.learning_rate == pytest.approx(5e-3)
    assert action.endswith("halve_lr")


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------

HEALTHY = list(np.exp(-np.arange(50) / 20) + 0.5)


def test_grid_midpoint():
    assert SearchGrid().midpoint == (1e-3, 25)
    with pytest.raises(ConfigurationError):
        SearchGrid(learning_rates=(1e-1,))


def test_search_stops_at_target(tmp_path):
    seen = []

    def run(c):
        seen.append(c)
        return TrialOutcome(0.97, HEALTHY, payload="model")

    result = hyperparameter_search(run, cfg(), log_path=tmp_path / "search.jsonl")
    assert len(seen) == 1 and result.successful
    assert (seen[0].learning_rate, seen[0].batch_size) == (1e-3, 25)
    assert result.best_payload == "model"
    log = load_search_log(tmp_path / "search.jsonl")
    assert [e["action"] for e in log] == ["stop"]


def test_search_exhausts_budget(tmp_path):
    seen = []

    def run(c):
        seen.append(c.learning_rate)
        return TrialOutcome(0.5 + 0.01 * len(seen), HEALTHY)

    result = hyperparameter_search(run, cfg(), log_path=tmp_path / "search.jsonl")
    assert seen == pytest.approx([1e-3, 2e-3, 4e-3, 8e-3])
    assert not result.successful
    assert result.best.learning_rate == pytest.approx(8e-3)
    log = load_search_log(tmp_path / "search.jsonl")
    assert len(log) == 4 and log[-1]["action"] == "stop"
    assert all(e["action"] == "double_lr" for e in log[:-1])


def test_search_treats_non_finite_loss_as_divergence():
    seen = []

    def run(c):
        seen.append(c.learning_rate)
        if len(seen) == 1:
            raise NonFiniteLossError("nan", "snap.pt")
        return TrialOutcome(0.99, HEALTHY)

    result = hyperparameter_search(run, cfg())
    assert seen == pytest.approx([1e-3, 5e-4])
    assert result.trials[0]["score"] is None and result.trials[0]["diverged"]
    assert result.successful


def test_search_replay_is_identical(tmp_path):
    def run(c):
        return TrialOutcome(c.learning_rate * 10, HEALTHY)

    a = hyperparameter_search(run, cfg(), log_path=tmp_path / "a.jsonl")
    b = hyperparameter_search(run, cfg(), log_path=tmp_path / "b.jsonl")
    assert a.trials == b.trials
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

class PassThrough(nn.Module):
    """Treats its input as the logits."""

    def forward(self, x):
        return ClassifierOutput(x, x)


def test_evaluate_encoder_known_scores():
    logits = torch.tensor([[5.0, -5.0], [5.0, 5.0], [-5.0, -5.0], [-5.0, 5.0]])
    labels = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    m = evaluate_encoder(PassThrough(), TensorDataset(logits, labels), ["a", "b"])
    assert m["accuracy"] == 0.75
    assert m["per_label_accuracy"] == {"a": 1.0, "b": 0.75}
    assert m["per_label_pr_auc"]["a"] == pytest.approx(1.0)
    assert m["n"] == 4
    low, high = m["accuracy_ci"]
    assert low < 0.75 < high


def test_evaluate_encoder_empty():
    with pytest.raises(InvalidInputError):
        evaluate_encoder(PassThrough(), TensorDataset(torch.zeros(0, 2), torch.zeros(0, 2)), ["a", "b"])


def _ref(*body):
    return TokenSequence((SOS_ID,) + body + (EOS_ID,))


def test_next_word_accuracy_counts_non_pad_targets():
    cfg_ = DecoderConfig(vocab_size=9, n_blocks=1, model_dim=8, n_heads=2, ffn_dim=8, max_len=8,
                         representation="feature_maps", feature_size=2)
    torch.manual_seed(0)
    model = build_decoder(cfg_).double().eval()
    with torch.no_grad():
        model.lm_head.weight.zero_()
        model.lm_head.bias.zero_()
        model.lm_head.bias[5] = 100.0
    refs = [_ref(5, 5, 6), _ref(5, 7)]
    images = torch.rand(2, 2, 3, 1, 2, dtype=torch.float64)
    specs = [AbnormalitySpec(False, 0, None)] * 2
    ds = ReportDataset(images, refs, specs, ["a", "b"])
    result = next_word_accuracy(model, ds)
    # targets: [5, 5, 6, eos] and [5, 7, eos]; pad positions are skipped
    assert (result.correct, result.total) == (3, 7)
    assert ds.references[1, -1].item() == PAD_ID


def test_ground_truth_reports_are_fully_factual(lib):
    specs = [AbnormalitySpec(m, r, lobe) for m, r, lobe in
             [(True, 90, Lobe.LUL), (False, -45, Lobe.LLL), (False, 0, Lobe.RML), (True, 45, Lobe.RLL)]]
    texts = [render_report(s, lib, [0, i]).text for i, s in enumerate(specs)]
    result = score_reports(texts, specs, lib, Task.COMBINED)
    assert result.accuracy == 1.0 and result.n == 4
    assert result.per_kind == {"mirror": 1.0, "rotation": 1.0, "occlusion": 1.0}


def test_wrong_rotation_fails_factual_accuracy(lib):
    truth = AbnormalitySpec(False, 90, Lobe.RUL)
    text = render_report(AbnormalitySpec(False, -90, Lobe.RUL), lib, [0, 0]).text
    result = score_reports([text], [truth], lib, Task.COMBINED)
    assert result.accuracy == 0.0
    assert result.per_kind["rotation"] == 0.0
    assert result.per_kind["mirror"] == 1.0


def test_score_reports_length_mismatch(lib):
    with pytest.raises(InvalidInputError):
        score_reports(["a."], [], lib)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def test_task_registry():
    assert resolve_task("combined").n_labels == 11
    assert resolve_task("rotation").n_labels == 5
    assert resolve_task("mirror").n_labels == 1
    mined = resolve_task("mined:pleural_effusion")
    assert mined.label_names == ("pleural_effusion",) and mined.surrogate is None
    for bad in ("mined:", "tumour"):
        with pytest.raises(ConfigurationError):
            resolve_task(bad)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    phantoms = collect_phantoms(root / "phantoms", n=3, seed=7, shape=(16, 16, 16))
    out = root / "combined"
    materialize_dataset(build_dataset(phantoms, Task.COMBINED, seed=7), root / "phantoms", out)
    return out


def test_volume_dataset_items(small_dataset):
    ds = VolumeDataset(small_dataset, None)
    assert len(ds) == 3 and ds.task.name == "combined"
    volume, label = ds[0]
    assert volume.dtype == torch.float32 and tuple(volume.shape) == (16, 16, 16)
    assert label.shape == (11,)
    assert ds.volume_shape == (16, 16, 16)


def test_volume_dataset_rejects_other_surrogate_task(small_dataset):
    with pytest.raises(ConfigurationError):
        VolumeDataset(small_dataset, None, "rotation")


def test_volume_dataset_with_mined_labels(small_dataset):
    ds = VolumeDataset(small_dataset, None)
    rows = [{"report_id": s.sample_id, "label_name": "nodule", "value": i % 2} for i, s in enumerate(ds.samples)]
    pd.DataFrame(rows).to_csv(small_dataset / MINED_LABELS_FILE, index=False)
    try:
        mined = VolumeDataset(small_dataset, None, "mined:nodule")
        assert mined.labels[:, 0].tolist() == [0.0, 1.0, 0.0]
        with pytest.raises(ConfigurationError):
            load_mined_labels(small_dataset / MINED_LABELS_FILE, "effusion")
    finally:
        (small_dataset / MINED_LABELS_FILE).unlink()


def test_mined_labels_missing_file(tmp_path):
    with pytest.raises(MissingInputError):
        load_mined_labels(tmp_path / MINED_LABELS_FILE, "nodule")
