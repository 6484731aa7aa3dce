import io
import math

import numpy as np
import pytest
from scipy import stats

from conftest import small_config
from okaf import checkpoint
from okaf.curriculum import (DESK_LR_SCALE, TRACE_HEADER, CyclicSource, EmaShadow, OptimState, StageConfig,
                             adamw_step, clip_global_norm, corpus_images, decile_means, default_stage,
                             ema_update, optim_from_state, optim_state_dict, pretrain_vae, run_curriculum,
                             sample_mixture, split_by_category, stages_from_text, stages_to_text, train_stage)
from okaf.datagen import CATEGORIES, generate
from okaf.errors import NumericError, ParameterError, ValidationError
from okaf.metrics import psnr
from okaf.model import ModelConfig, UnifiedModel
from okaf.tensor import Tensor


def short(stage_id, steps=4, **kw):
    cfg = default_stage(stage_id)
    return StageConfig.from_mapping({"steps": str(steps), "batch_size": "2", **kw}, cfg)


@pytest.fixture(scope="module")
def data():
    return split_by_category(generate({"text": 6, "t2i": 8, "i2t": 10, "interleaved": 10}, seed=0))


def test_default_stages_follow_the_recipe():
    s1, s2, s3 = (default_stage(k) for k in (1, 2, 3))
    assert [s.lr for s in (s1, s2, s3)] == [5e-5, 2.5e-5, 1e-5]
    assert s1.mixing == pytest.approx({"text": 5 / 105, "t2i": 25 / 105, "i2t": 75 / 105})
    assert s2.mixing == pytest.approx({"text": 0.05, "t2i": 0.45, "i2t": 0.40, "interleaved": 0.10})
    assert s3.mixing == pytest.approx({"text": 0.03, "t2i": 0.35, "i2t": 0.37, "interleaved": 0.25})
    assert [s.freeze["vit"] for s in (s1, s2, s3)] == [False, True, True]
    assert all(s.freeze["vae"] and s.ema_ratio == 0.995 for s in (s1, s2, s3))
    assert s1.effective_lr == pytest.approx(5e-5 * DESK_LR_SCALE)
    assert (s1.weights.w_ce, s1.weights.w_mse) == (0.25, 1.0)


def test_stage_config_validation():
    with pytest.raises(ValidationError):
        default_stage(4)
    with pytest.raises(ValidationError):
        StageConfig(1, 10, 1e-3, {"audio": 1.0}, {"vae": True})
    with pytest.raises(ValidationError):
        StageConfig(1, 10, 1e-3, {"text": 1.0}, {"vae": False})
    with pytest.raises(ParameterError):
        StageConfig(1, 10, 1e-3, {"text": -1.0}, {"vae": True})
    with pytest.raises(ValidationError, match="unknown stage config key"):
        StageConfig.from_mapping({"learning_rate": "1"}, default_stage(1))


def test_mixing_is_normalised():
    cfg = StageConfig(1, 10, 1e-3, {"t2i": 3, "text": 1}, {"vae": True})
    assert list(cfg.mixing) == ["text", "t2i"] and cfg.mixing == {"text": 0.25, "t2i": 0.75}


def test_point_mass_mixture():
    cfg = StageConfig(1, 10, 1e-3, {"i2t": 1.0}, {"vae": True})
    rng = np.random.default_rng(0)
    assert {sample_mixture(cfg, rng) for _ in range(200)} == {"i2t"}


def test_mixture_draws_are_seeded():
    cfg = default_stage(3)
    a = [sample_mixture(cfg, np.random.default_rng(9)) for _ in range(1)]
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    assert [sample_mixture(cfg, r1) for _ in range(50)] == [sample_mixture(cfg, r2) for _ in range(50)]
    assert a[0] in CATEGORIES


def test_stage2_mixture_chi_square():
    cfg = default_stage(2)
    rng = np.random.default_rng(0)
    n = 20_000
    draws = [sample_mixture(cfg, rng) for _ in range(n)]
    observed = [draws.count(c) for c in cfg.mixing]
    expected = [n * p for p in cfg.mixing.values()]
    assert stats.chisquare(observed, expected).pvalue > 1e-3
    for c, p in cfg.mixing.items():
        assert abs(draws.count(c) / n - p) <= 0.01


def test_adamw_first_step_moves_by_lr():
    p = {"w": Tensor(np.array([1.0, -2.0, 3.0]))}
    st = OptimState()
    adamw_step(p, {"w": np.array([0.5, -4.0, 1e-3])}, st, lr=0.1, eps=0.0)
    # bias-corrected first step is lr * sign(g)
    np.testing.assert_allclose(p["w"].data, [0.9, -1.9, 2.9], rtol=0, atol=1e-12)
    assert st.step == 1


def test_adamw_weight_decay_and_frozen():
    p = {"a": Tensor(np.array([2.0])), "b": Tensor(np.array([2.0]))}
    st = OptimState()
    adamw_step(p, {"a": np.zeros(1), "b": np.ones(1)}, st, lr=0.1, weight_decay=0.5, frozen=["b"])
    assert p["a"].data[0] == pytest.approx(2.0 * (1 - 0.05))
    assert p["b"].data[0] == 2.0 and "b" not in st.m


def test_optimiser_state_round_trip(tmp_path):
    p = {"w": Tensor(np.ones((2, 2)))}
    st = OptimState()
    adamw_step(p, {"w": np.full((2, 2), 0.3)}, st, lr=0.01)
    checkpoint.save(tmp_path / "o.okaf", optim_state_dict(st))
    back = optim_from_state(checkpoint.load(tmp_path / "o.okaf"))
    assert back.step == 1
    np.testing.assert_array_equal(back.m["w"], st.m["w"])
    np.testing.assert_array_equal(back.v["w"], st.v["w"])


def test_ema_closed_form():
    ema = EmaShadow({"w": np.zeros(3)}, 0.9)
    for _ in range(10):
        ema_update(ema, {"w": np.ones(3)})
    np.testing.assert_allclose(ema.shadow["w"], 1 - 0.9 ** 10, rtol=0, atol=1e-15)
    ema_update(ema, {"w": np.ones(3), "x": np.ones(1)}, names=["w"])
    assert set(ema.shadow) == {"w"}


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(g, 1.0) == 5.0
    assert math.sqrt(g["a"][0] ** 2 + g["b"][0] ** 2) == pytest.approx(1.0)
    small = {"a": np.array([0.1])}
    clip_global_norm(small, 1.0)
    assert small["a"][0] == 0.1


def test_cyclic_source_visits_every_record(data):
    src = CyclicSource(data, seed=0)
    got = src.take("i2t", len(data["i2t"]))
    assert sorted(s.id for s in got) == sorted(s.id for s in data["i2t"])
    with pytest.raises(ValidationError):
        CyclicSource({"i2t": []}, 0).take("i2t", 1)


def test_short_stage_is_deterministic(data):
    traces = []
    for _ in range(2):
        sink = io.StringIO()
        m = UnifiedModel(small_config())
        trace = train_stage(m, data, short(2), log_sink=sink)
        traces.append((sink.getvalue(), m.state_dict()))
        assert all(math.isfinite(r.total) for r in trace)
    assert traces[0][0] == traces[1][0]
    assert all(np.array_equal(traces[0][1][k], traces[1][1][k]) for k in traces[0][1])
    lines = traces[0][0].splitlines()
    assert lines[0] == TRACE_HEADER and len(lines) == 5
    assert all(len(line.split(",")) == 6 for line in lines)


def test_frozen_groups_stay_bitwise_fixed(data):
    m = UnifiedModel(small_config())
    before = m.state_dict()
    cfg = short(2, steps=3)
    train_stage(m, data, cfg)
    after = m.state_dict()
    for name in m.params:
        same = np.array_equal(before[name], after[name])
        if name in set(m.names("vit")) | set(m.names("vae")):
            assert same, name
    assert not np.array_equal(before["lm_head.w"], after["lm_head.w"])
    assert all(t.requires_grad for t in m.params.values())


def test_non_finite_parameters_fail_at_step_zero(data):
    m = UnifiedModel(small_config())
    m.params["lm_head.w"].data[0, 0] = np.nan
    with pytest.raises(NumericError) as err:
        train_stage(m, data, short(1))
    assert err.value.step == 0


def test_missing_category_data_is_rejected(data):
    with pytest.raises(ValidationError, match="no data"):
        train_stage(UnifiedModel(small_config()), {"text": data["text"]}, short(1))


def test_decile_means():
    from okaf.curriculum import StepRecord
    trace = [StepRecord(i, "i2t", float(20 - i), 0.0, 0.0, 0.0, True, False) for i in range(20)]
    assert decile_means(trace, "ntp") == (19.5, 1.5)
    with pytest.raises(ValidationError):
        decile_means(trace, "flow")


def test_stage_config_text_round_trip():
    stages = [short(1, 5), short(2, 6, w_ce="0.5"), short(3, 7, freeze_understanding="true")]
    back = stages_from_text(stages_to_text(stages))
    assert back == stages
    assert back[2].freeze["understanding"] and back[1].weights.w_ce == 0.5


def test_curriculum_files_and_reload(data, tmp_path):
    m = UnifiedModel(small_config())
    res = run_curriculum(m, data, [short(1, 2), short(2, 2)], out_dir=tmp_path, vae_steps=3)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["stage0.okaf", "stage1.okaf", "stage1_ema.okaf", "stage1_optim.okaf", "stage1_trace.csv",
                     "stage2.okaf", "stage2_ema.okaf", "stage2_optim.okaf", "stage2_trace.csv"]
    fresh = UnifiedModel(small_config(seed=99))
    fresh.load_state_dict(checkpoint.load(res[-1].checkpoint))
    probe = generate({"i2t": 1}, seed=3)[0]
    from okaf.model import Mode, build_sequence
    from okaf.records import prompt_ids
    from okaf.tensor import no_grad

    def out(model):
        with no_grad():
            seq = build_sequence(prompt_ids(probe), model.vit_encode(probe.x_v), None, Mode.UNDERSTAND)
            return model.forward(seq).data
    assert out(fresh).tobytes() == out(m).tobytes()


def test_stage_by_stage_equals_one_run(data):
    stages = [short(1, 2), short(2, 2)]
    a = UnifiedModel(small_config())
    run_curriculum(a, data, stages, vae_steps=2)
    b = UnifiedModel(small_config())
    ema = EmaShadow.of(b)
    st = OptimState()
    first = run_curriculum(b, data, stages[:1], vae_steps=2, ema=ema, optim=st)
    ema2, st2 = EmaShadow(dict(first[0].ema_state)), optim_from_state(optim_state_dict(st))
    run_curriculum(b, data, stages[1:], vae_steps=0, ema=ema2, optim=st2)
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)


def test_autoencoder_reconstructs_held_out_images():
    model = UnifiedModel(ModelConfig(seed=0))
    train = generate({"t2i": 40, "i2t": 40, "interleaved": 20}, seed=0)
    held = [im for s in generate({"t2i": 20, "interleaved": 10}, seed=1, split="test") for im in s.images()
            if im.shape == (16, 16, 1)]
    losses = pretrain_vae(model, corpus_images(split_by_category(train)), steps=600, lr=1e-2)
    assert losses[-1] < losses[0]
    scores = []
    from okaf.tensor import no_grad
    with no_grad():
        for im in held:
            rec = model.vae_decode(model.vae_encode(im), im.height, im.width)
            scores.append(psnr(np.clip(rec.pixels, 0, 1), im.pixels))
    assert np.mean(scores) > 25.0
