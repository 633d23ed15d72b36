import io
import json
import math

import pytest
import torch

from s4former.conv_module import ConfigError, ConvModule, ConvModuleSpec, S4DConfig, build_encoder
from s4former.s4d import init_s4d
from s4former.tasks import IGNORE_INDEX, TaskSpec, generate_task
from s4former.training import (
    DivergedTrainingError,
    ModelConfig,
    TrainConfig,
    build_model,
    grad_check,
    train,
)


def small_model(approach="baseline", **kw):
    cfg = dict(approach=approach, h=16, kernel_size=4, blocks=1, ffn_mult=2, vocab=4)
    cfg.update(kw)
    return build_model(ModelConfig(**cfg), seed=0)


def small_task(**kw):
    spec = dict(kind="delayed_echo", seq_len=24, delay=3, vocab=4, n_train=64, n_eval=32, seed=0)
    spec.update(kw)
    return TaskSpec(**spec)


# tasks


def test_zero_delay_is_copy():
    data = generate_task(small_task(delay=0))
    assert torch.equal(data.train.targets, data.train.tokens)


def test_delay_shift():
    data = generate_task(small_task(seq_len=16, delay=4))
    t, y = data.train.tokens, data.train.targets
    assert torch.equal(y[:, 4:], t[:, :12])
    assert (y[:, :4] == IGNORE_INDEX).all()


def test_local_pattern_window():
    data = generate_task(small_task(kind="local_pattern"))
    t, y = data.train.tokens, data.train.targets
    assert (y[:, :2] == IGNORE_INDEX).all()
    ref = torch.maximum(torch.maximum(t[:, :-2], t[:, 1:-1]), t[:, 2:])
    assert torch.equal(y[:, 2:], ref)


def test_generation_is_seeded():
    a, b = generate_task(small_task()), generate_task(small_task())
    c = generate_task(small_task(seed=1))
    assert torch.equal(a.train.tokens, b.train.tokens) and torch.equal(a.eval.tokens, b.eval.tokens)
    assert not torch.equal(a.train.tokens, c.train.tokens)
    assert not torch.equal(a.train.tokens[:32], a.eval.tokens)


def test_one_hot_inputs():
    data = generate_task(small_task())
    x = data.train.inputs(slice(0, 2))
    assert x.shape == (2, 24, 4) and x.dtype == torch.float64
    assert torch.equal(x.argmax(-1), data.train.tokens[:2])


@pytest.mark.parametrize(
    "kw,field",
    [(dict(delay=24), "task.delay"), (dict(kind="copy"), "task.kind"), (dict(vocab=1), "task.vocab")],
)
def test_invalid_task(kw, field):
    with pytest.raises(ConfigError) as err:
        generate_task(small_task(**kw))
    assert err.value.field == field


# training loop


def test_zero_learning_rate_leaves_parameters_unchanged():
    model = small_model("dir")
    before = {k: v.clone() for k, v in model.named_parameters()}
    train(model, small_task(), TrainConfig(lr=0.0, steps=5, batch_size=4, eval_every=5), stream=None)
    for k, v in model.named_parameters():
        assert torch.equal(before[k], v), k


def test_history_records_and_log(tmp_path):
    log = tmp_path / "metrics.log"
    out = io.StringIO()
    hist = train(small_model(), small_task(), TrainConfig(steps=6, batch_size=4, eval_every=3), log_path=log, stream=out)
    assert [(r["step"], r["split"]) for r in hist.records] == [(3, "train"), (3, "eval"), (6, "train"), (6, "eval")]
    lines = log.read_text().splitlines()
    assert lines == out.getvalue().splitlines()
    assert [json.loads(line) for line in lines] == hist.records


def test_training_is_deterministic(tmp_path):
    runs = []
    for i in range(2):
        model = small_model("rep", rep_left_context=4)
        ck, log = tmp_path / f"m{i}.ckpt", tmp_path / f"m{i}.log"
        train(model, small_task(), TrainConfig(steps=4, batch_size=4, eval_every=2, seed=3), log, ck, stream=None)
        runs.append((ck.read_bytes(), log.read_bytes()))
    assert runs[0] == runs[1]


def test_divergence_reports_last_finite_step():
    model = small_model()
    calls = {"n": 0}
    original = model.forward

    def forward(*a, **kw):
        calls["n"] += 1
        out = original(*a, **kw)
        return out * math.nan if calls["n"] == 3 else out

    model.forward = forward
    with pytest.raises(DivergedTrainingError) as err:
        train(model, small_task(), TrainConfig(steps=10, batch_size=2, eval_every=100), stream=None)
    assert err.value.step == 3 and err.value.last_finite_step == 2


def test_early_stop_at_target():
    hist = train(small_model(), small_task(), TrainConfig(steps=50, batch_size=2, eval_every=1, target_accuracy=0.0), stream=None)
    assert hist.records[-1]["step"] == 1


def test_zero_steps_evaluates_initial_model(tmp_path):
    ck = tmp_path / "init.ckpt"
    hist = train(small_model(), small_task(), TrainConfig(steps=0), checkpoint_path=ck, stream=None)
    assert hist.records[0]["step"] == 0 and ck.exists()


@pytest.mark.parametrize(
    "kw,field",
    [(dict(lr=-1.0), "train.lr"), (dict(batch_size=0), "train.batch_size"), (dict(steps=-1), "train.steps"),
     (dict(clip_norm=0.0), "train.clip_norm"), (dict(beta1=1.0), "train.beta1")],
)
def test_invalid_train_config(kw, field):
    with pytest.raises(ConfigError) as err:
        TrainConfig(**kw).validate()
    assert err.value.field == field


def test_invalid_model_config_names_field():
    with pytest.raises(ConfigError) as err:
        ModelConfig(approach="rep", rep_left_context=0).validate()
    assert err.value.field == "model.rep_left_context"


def test_local_pattern_solved_by_baseline():
    task = TaskSpec(kind="local_pattern", seq_len=64, vocab=8, n_train=1024, n_eval=256, seed=0)
    model = build_model(ModelConfig(approach="baseline", kernel_size=4, h=32, blocks=2, ffn_mult=2), seed=0)
    cfg = TrainConfig(lr=3e-3, steps=2000, batch_size=16, eval_every=100, target_accuracy=0.99)
    hist = train(model, task, cfg, stream=None)
    last = hist.last("eval")
    assert last["accuracy"] >= 0.99 and last["step"] <= 2000


# finite-difference checks


def test_grad_check_s4d_layer():
    layer = init_s4d("lin", 2, 2, seed=1)
    with torch.no_grad():
        layer.log_dt.add_(1.5)
    u = torch.randn(8, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    res = grad_check(lambda: layer(u).pow(2).sum(), dict(layer.named_parameters()))
    assert res.max_rel_error < 1e-4


@pytest.mark.parametrize("approach", ["dir", "rep"])
def test_grad_check_module_h8(approach):
    spec = ConvModuleSpec(approach, h=8, kernel_size=3, rep_left_context=5, s4d=S4DConfig("real", 4))
    module = ConvModule(spec, generator=torch.Generator().manual_seed(0)).train()
    x = torch.randn(2, 10, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    res = grad_check(lambda: torch.tanh(module(x)).sum(), dict(module.named_parameters()), max_entries=6)
    assert res.max_rel_error < 1e-4, res


def test_grad_check_reports_offender():
    w = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    res = grad_check(lambda: (w**2).sum(), {"w": w})
    assert res.worst_param == "w" and res.checked == 2 and res.max_rel_error < 1e-8


def test_encoder_grad_check_h8():
    spec = ConvModuleSpec("com", h=8, kernel_size=2, s4d=S4DConfig("lin", 4))
    enc = build_encoder([spec, spec], with_attention=True, ffn_mult=2, seed=0).train()
    x = torch.randn(2, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    res = grad_check(lambda: torch.tanh(enc(x)).sum(), dict(enc.named_parameters()), max_entries=4)
    assert res.max_rel_error < 1e-4, res
