import numpy as np
import pytest

from flowforge import experts, flow_core as fc, numkit
from flowforge import posterworld as pw


@pytest.fixture(scope="module")
def world():
    schedule = fc.get_schedule("rectified", "time")
    samples, _ = pw.make_dataset(pw.TASKS, 30, seed=5)
    base = fc.init_velocity_net(144, pw.cond_dim(12), (48, 48), numkit.make_rng(1))
    return schedule, samples, base


def clone_params(p):
    return [w.copy() for w in p.flat()]


def test_task_groups_partition_six_tasks():
    local = experts.ExpertSpec("local").tasks
    global_ = experts.ExpertSpec("global").tasks
    assert set(local) | set(global_) == set(pw.LOCAL_TASKS + pw.GLOBAL_TASKS)
    assert not set(local) & set(global_)
    assert experts.ExpertSpec("mixed").tasks == local + global_
    with pytest.raises(ValueError):
        experts.ExpertSpec("hybrid")


def test_sft_zero_steps_is_noop(world):
    schedule, samples, base = world
    spec = experts.ExpertSpec("local", rank=4, steps=0)
    data = [s for s in samples if s.kind in spec.tasks or s.kind == "text_aux"]
    adapters, losses = experts.train_sft(base, spec, data, numkit.make_rng(2),
                                         schedule)
    assert losses == []
    x = numkit.make_rng(3).standard_normal((4, base.in_dim))
    assert np.array_equal(numkit.forward(base, x),
                          numkit.forward(base, x, adapters))


def test_sft_rejects_foreign_tasks(world):
    schedule, samples, base = world
    spec = experts.ExpertSpec("global", steps=1)
    with pytest.raises(ValueError, match="foreign"):
        experts.train_sft(base, spec, samples, numkit.make_rng(4), schedule)


def test_adapters_overfit_single_training_tuple(world):
    # overfit oracle: one fixed (x0, x1, t) tuple must be fit essentially
    # exactly through the adapter path
    schedule, samples, base = world
    sample = next(s for s in samples if s.kind == "fill")
    rng = numkit.make_rng(6)
    x0 = sample.target.ravel()[None, :]
    cond = pw.encode_condition(sample)[None, :]
    batch = fc.make_flow_batch(x0, rng.standard_normal(x0.shape),
                               np.array([0.41]), cond, schedule)
    adapters = numkit.init_adapters(base, 8, rng)
    model = fc.VelocityModel(base, adapters)
    opt = numkit.AdamW(numkit.adapter_flat(adapters), lr=1e-2)
    loss = np.inf
    for _ in range(2000):
        loss, grads = fc.fm_loss(model, batch, schedule)
        opt.step(grads.adapter_flat())
    assert loss < 1e-3


def test_sft_deterministic_under_seed(world):
    schedule, samples, base = world
    spec = experts.ExpertSpec("global", rank=2, steps=15)
    data = [s for s in samples if s.kind in spec.tasks or s.kind == "text_aux"]
    _, l1 = experts.train_sft(base, spec, data, numkit.make_rng(7), schedule)
    _, l2 = experts.train_sft(base, spec, data, numkit.make_rng(7), schedule)
    assert l1 == l2


def test_sft_leaves_base_untouched(world):
    schedule, samples, base = world
    before = clone_params(base)
    spec = experts.ExpertSpec("local", rank=2, steps=25)
    data = [s for s in samples if s.kind in spec.tasks or s.kind == "text_aux"]
    experts.train_sft(base, spec, data, numkit.make_rng(8), schedule)
    for a, b in zip(before, base.flat()):
        assert np.array_equal(a, b)


def test_aux_ratio_without_aux_pool_rejected(world):
    schedule, samples, base = world
    spec = experts.ExpertSpec("local", steps=1, aux_ratio=0.2)
    data = [s for s in samples if s.kind in spec.tasks]
    with pytest.raises(ValueError, match="text_aux"):
        experts.train_sft(base, spec, data, numkit.make_rng(9), schedule)


def _teachers(base, samples, schedule, steps=150):
    spec_l = experts.ExpertSpec("local", rank=4, steps=steps, lr=3e-3, t_eps=0.03)
    spec_g = experts.ExpertSpec("global", rank=4, steps=steps, lr=3e-3, t_eps=0.03)
    loc = [s for s in samples if s.kind in spec_l.tasks or s.kind == "text_aux"]
    glo = [s for s in samples if s.kind in spec_g.tasks or s.kind == "text_aux"]
    ad_l, _ = experts.train_sft(base, spec_l, loc, numkit.make_rng(20), schedule)
    ad_g, _ = experts.train_sft(base, spec_g, glo, numkit.make_rng(21), schedule)
    return ad_l, ad_g


def _task_batch(samples, schedule, rng, n=12):
    by_kind = pw.by_kind([s for s in samples if s.kind != "text_aux"])
    interleaved = [g[i] for i in range(n) for g in by_kind.values()]
    task_samples = interleaved[:n]
    pool = experts.make_pool(task_samples)
    x0, cond = pool.x0, pool.cond
    t = fc.draw_times(rng, x0.shape[0], 0.03)
    batch = fc.make_flow_batch(x0, rng.standard_normal(x0.shape), t, cond, schedule)
    routes = [experts.default_routing()[s.kind] for s in task_samples]
    return batch, routes


def _aux_batch(samples, schedule, rng, n=4):
    aux = [s for s in samples if s.kind == "text_aux"][:n]
    pool = experts.make_pool(aux)
    t = fc.draw_times(rng, n, 0.03)
    return fc.make_flow_batch(pool.x0, rng.standard_normal(pool.x0.shape), t,
                              pool.cond, schedule)


def test_distill_lambda_zero_matches_plain_sft_gradients(world):
    schedule, samples, base = world
    ad_l, ad_g = _teachers(base, samples, schedule, steps=40)
    student_ad = numkit.init_adapters(base, 3, numkit.make_rng(22))
    student = fc.VelocityModel(base, student_ad)
    teachers = {"local": fc.VelocityModel(base, ad_l),
                "global": fc.VelocityModel(base, ad_g)}
    rng = numkit.make_rng(23)
    batch_aux = _aux_batch(samples, schedule, rng)
    batch_task, routes = _task_batch(samples, schedule, rng)
    total, aux, dist, grads = experts.distill_grads(
        student, teachers, routes, batch_aux, batch_task, 0.0, schedule)
    assert total == aux
    loss_ref, grads_ref = fc.fm_loss(student, batch_aux, schedule)
    assert aux == loss_ref
    for a, b in zip(grads.adapter_flat(), grads_ref.adapter_flat()):
        assert np.array_equal(a, b)


def test_distill_loss_decomposes_additively(world):
    schedule, samples, base = world
    ad_l, ad_g = _teachers(base, samples, schedule, steps=40)
    student = fc.VelocityModel(base, numkit.init_adapters(base, 3,
                                                          numkit.make_rng(24)))
    teachers = {"local": fc.VelocityModel(base, ad_l),
                "global": fc.VelocityModel(base, ad_g)}
    rng = numkit.make_rng(25)
    batch_aux = _aux_batch(samples, schedule, rng)
    batch_task, routes = _task_batch(samples, schedule, rng)
    lam = 1.7
    total, aux, dist, _ = experts.distill_grads(
        student, teachers, routes, batch_aux, batch_task, lam, schedule)
    assert abs(total - (aux + lam * dist)) < 1e-12


def test_distill_missing_teacher_rejected(world):
    schedule, samples, base = world
    ad_l, _ = _teachers(base, samples, schedule, steps=10)
    student = fc.VelocityModel(base, numkit.init_adapters(base, 2,
                                                          numkit.make_rng(26)))
    rng = numkit.make_rng(27)
    batch_task, routes = _task_batch(samples, schedule, rng)
    with pytest.raises(ValueError, match="missing teacher"):
        experts.distill_grads(student, {"local": fc.VelocityModel(base, ad_l)},
                              routes, None, batch_task, 1.0, schedule)


def test_distill_converges_toward_teachers(world, tmp_path):
    schedule, samples, base = world
    ad_l, ad_g = _teachers(base, samples, schedule, steps=400)
    cfg = experts.DistillConfig(rank=4, steps=1200, lr=3e-3, batch=32,
                                t_eps=0.03)
    before_base = clone_params(base)
    student, curve = experts.distill(base, ad_l, ad_g, cfg, samples,
                                     numkit.make_rng(28), schedule)
    for a, b in zip(before_base, base.flat()):
        assert np.array_equal(a, b)

    # held-out supervision points: disjoint sample seeds
    held, _ = pw.make_dataset(("extend", "fill", "layout", "style"), 12, seed=99)
    pool = experts.make_pool(held)
    rng = numkit.make_rng(29)
    t = fc.draw_times(rng, len(held), 0.03)
    x1 = rng.standard_normal(pool.x0.shape)
    x_t, _ = fc.interpolate(pool.x0, x1, t, schedule)
    routing = experts.default_routing()
    teacher_models = {"local": fc.VelocityModel(base, ad_l),
                      "global": fc.VelocityModel(base, ad_g)}

    def gap(adapters):
        model = fc.VelocityModel(base, adapters)
        v_s = model.velocity(x_t, t, pool.cond)
        out = 0.0
        for i, s in enumerate(held):
            v_t = teacher_models[routing[s.kind]].velocity(
                x_t[[i]], t[[i]], pool.cond[[i]])
            out += float(np.sum((v_s[i] - v_t[0]) ** 2))
        return out / len(held)

    fresh = numkit.init_adapters(base, cfg.rank, numkit.make_rng(30))
    assert gap(student) < 0.1 * gap(fresh)

    # frozen-teacher discipline: reloaded teachers give identical losses
    ck = tmp_path / "teacher_local.ckpt"
    numkit.save_checkpoint(ck, numkit.Checkpoint("local", base, ad_l))
    reloaded = numkit.load_checkpoint(ck).adapters
    _, curve2 = experts.distill(base, reloaded, ad_g, cfg, samples,
                                numkit.make_rng(28), schedule)
    assert curve == curve2


def test_pretrain_trains_base(world):
    schedule, samples, _ = world
    params = fc.init_velocity_net(144, pw.cond_dim(12), (32,), numkit.make_rng(31))
    before = clone_params(params)
    losses = experts.pretrain(params, samples, steps=30, lr=1e-3, batch=16,
                              rng=numkit.make_rng(32), schedule=schedule)
    assert len(losses) == 30
    assert any(not np.array_equal(a, b) for a, b in zip(before, params.flat()))
