"""Acceptance suite: one test per criterion, summarized as PASS/FAIL lines at the end of the run."""

import subprocess
import sys
import time

import numpy as np
import pytest

from dunet import tensor as T
from dunet.cli import main as cli_main
from dunet.data import SyntheticSpec, generate, read_cloud, write_cloud
from dunet.diffusion_lab import (
    constant,
    classic_diffusion_step,
    diffuse,
    edge_response,
    perona_malik,
    two_region_cloud,
)
from dunet.geometry import PointCloud, farthest_point_sample, knn, radius_neighbors, self_excluded_knn
from dunet.gradcheck import check_gradients
from dunet.layers import (
    DiffusionUnit,
    DiffusionUnitSpec,
    KPConvL,
    Linear,
    PhiFilter,
    PointwiseBlock,
    RelativePositionalEncoding,
    VarphiWrapper,
    diffusion_unit_step,
    global_max_pool,
)
from dunet.model import ModelConfig, build_model, forward_classify, forward_segment, smoothness_probe
from dunet.train import TrainConfig, cross_entropy, evaluate, fit, load_checkpoint, save_checkpoint

# frozen from an independent hand-loop integration (n=512, seed 0, tau=1, T=50)
PM_RATIO_T50 = 0.9322908344173831
CONST_RATIO_T50 = 0.42780802406903295

ABLATION_SEEDS = (0, 1, 2)
ABLATION_WIDTHS = dict(widths=(16, 32, 64, 128), lift_width=16)


def detail(request, text):
    request.node.criterion_detail = text


def randomize(module, rng):
    for _, p in module.named_parameters():
        p.data[...] = rng.normal(size=p.shape)


# --- 1 ---------------------------------------------------------------------------

def _layer_checks(rng):
    pos = rng.random((14, 3))
    nbrs = self_excluded_knn(pos, 4)
    x = T.tensor(rng.normal(size=(14, 3)), requires_grad=True)
    phi, vp = PhiFilter(3, rng=rng), VarphiWrapper(3)
    du = DiffusionUnit(DiffusionUnitSpec(3, k=4, repeat=2), rng=rng)
    rpe, conv = RelativePositionalEncoding(3, rng=rng), KPConvL(3, 6, rng=rng)
    head_fc, head_out = PointwiseBlock(3, 4, rng), Linear(4, 5, rng=rng)
    for m in (vp, du, head_fc):
        randomize(m, rng)
    offs = rng.normal(size=(14, 3))
    cn = radius_neighbors(pos[:5], pos, 0.6)
    head_x = T.tensor(rng.normal(size=(6, 3)), requires_grad=True)
    return {
        "phi": (lambda: phi(x), {"x": x, **dict(phi.named_parameters())}),
        "varphi": (lambda: vp(x), {"x": x, **dict(vp.named_parameters())}),
        "du": (lambda: du(x, nbrs), {"x": x, **dict(du.named_parameters())}),
        "rpe": (lambda: rpe(x, offs), {"x": x, **dict(rpe.named_parameters())}),
        "kpconv_l": (lambda: conv(x, pos, pos[:5], cn, 0.6), {"x": x, **dict(conv.named_parameters())}),
        "pooling": (lambda: T.reshape(global_max_pool(x), (1, 3)), {"x": x}),
        "head": (lambda: head_out(head_fc(head_x)), {"x": head_x, **dict(head_fc.named_parameters()),
                                                      **dict(head_out.named_parameters())}),
    }


def _toy_model_errors(task, n_clouds):
    cfg = ModelConfig(task=task, widths=(8, 8, 8, 8), lift_width=8, ratios=(0.5,) * 4, head_widths=(8, 8),
                      dropout=0.0)
    model = build_model(cfg, seed=0)
    model.train()
    rng = np.random.default_rng(1)
    pos = [rng.normal(size=(32, 3)) for _ in range(n_clouds)]
    clouds = [PointCloud(p) for p in pos]
    geo, x = model.geometry(clouds), model.inputs(clouds)
    targets = (np.arange(n_clouds) % cfg.num_classes if task == "classification"
               else (np.concatenate(pos)[:, 2] > 0).astype(int))
    stats = [(m.state, m.state.running_mean.copy(), m.state.running_var.copy())
             for _, m in model.named_modules() if hasattr(m, "state")]

    def loss():
        for s, mean, var in stats:
            s.running_mean[...] = mean
            s.running_var[...] = var
        return cross_entropy(model(x, geo), targets)

    return check_gradients(loss, dict(model.named_parameters()), step=1e-6)


@pytest.mark.criterion(1, "gradient integrity")
def test_criterion_1_gradient_integrity(request):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    layer_worst = {}
    for name, (build, inputs) in _layer_checks(rng).items():
        probe = rng.normal(size=build().shape)
        layer_worst[name] = max(check_gradients(lambda: T.sum(build() * probe), inputs).values())
    model_worst = {task: max(_toy_model_errors(task, n).values())
                   for task, n in (("classification", 2), ("segmentation", 1))}
    elapsed = time.perf_counter() - start
    detail(request, f"worst layer err {max(layer_worst.values()):.1e}, "
                    f"worst model err {max(model_worst.values()):.1e}, {elapsed:.0f}s")
    assert max(layer_worst.values()) < 1e-4, layer_worst
    assert max(model_worst.values()) < 1e-3, model_worst
    assert elapsed < 60


# --- 2 ---------------------------------------------------------------------------

@pytest.mark.criterion(2, "constant fields are fixed points of the DU")
def test_criterion_2_fixed_point(request):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 9))
        n = int(rng.integers(2, 60))
        du = DiffusionUnit(DiffusionUnitSpec(d, k=8, repeat=int(rng.integers(1, 4))), rng=rng)
        du.phi.weight.data[...] = rng.normal(size=(d, d)) * 3
        du.varphi.bn.weight.data[...] = rng.normal(size=d) * 3
        du.varphi.bn.bias.data[...] = 0.0
        du.train(bool(seed % 2))
        u = np.tile(rng.normal(size=d) * 100, (n, 1))
        out = du(T.tensor(u), self_excluded_knn(rng.normal(size=(n, 3)), 8)).data
        worst = max(worst, float(np.max(np.abs(out - u))))
    elapsed = time.perf_counter() - start
    detail(request, f"max |out - in| = {worst:.1e} over 100 seeds, {elapsed:.2f}s")
    assert worst < 1e-12
    assert elapsed < 5


# --- 3 ---------------------------------------------------------------------------

@pytest.mark.criterion(3, "edge sign follows -sign(w)")
def test_criterion_3_sign_theorem(request):
    start = time.perf_counter()
    deltas = {w: edge_response(w) for w in (-0.5, -0.1, 0.1, 0.5)}
    zero = edge_response(0.0)
    elapsed = time.perf_counter() - start
    detail(request, ", ".join(f"w={w:+g}: {d:+.2e}" for w, d in deltas.items()) + f", w=0: {zero:.0e}")
    assert all(np.sign(d) == -np.sign(w) for w, d in deltas.items())
    assert abs(zero) < 1e-12
    assert elapsed < 1


# --- 4 ---------------------------------------------------------------------------

@pytest.mark.criterion(4, "DU with w*I equals the classic step bit for bit")
def test_criterion_4_cross_module(request):
    cases = 0
    for seed, n in enumerate((2, 3, 17, 64, 128, 255, 256, 511, 512)):
        rng = np.random.default_rng(seed)
        for d in (1, 3):
            for w in (-0.5, 0.25, 1.0):
                u = rng.normal(size=(n, d)) * 10
                nbrs = self_excluded_knn(rng.normal(size=(n, 3)), 16)
                classic = classic_diffusion_step(u, nbrs, constant(w), 1.0)
                learned = diffusion_unit_step(DiffusionUnitSpec(d, enable_varphi=False), u, nbrs,
                                              phi_weight=w * np.eye(d)).data
                assert np.array_equal(classic, learned), (n, d, w)
                cases += 1
    detail(request, f"{cases} clouds, 2 to 512 points, all bit-identical")


# --- 5 ---------------------------------------------------------------------------

@pytest.mark.criterion(5, "Perona-Malik preserves region contrast")
def test_criterion_5_contrast(request):
    start = time.perf_counter()
    cloud = two_region_cloud(512, contrast=1.0, seed=0)
    pm = diffuse(cloud, perona_malik(0.1), 50, 1.0).contrast[-1][1]
    const = diffuse(cloud, constant(1.0), 50, 1.0).contrast[-1][1]
    elapsed = time.perf_counter() - start
    detail(request, f"perona-malik {pm:.4f}, constant {const:.4f} (frozen {CONST_RATIO_T50:.4f}), {elapsed:.2f}s")
    assert pm > 0.9
    assert pm == pytest.approx(PM_RATIO_T50, abs=1e-12)
    assert const <= CONST_RATIO_T50 + 1e-12
    assert const < 0.5
    assert elapsed < 10


# --- 6 ---------------------------------------------------------------------------

@pytest.mark.criterion(6, "KPConv-l depthwise weights number l*d_out")
def test_criterion_6_parameter_count(request):
    model = build_model(ModelConfig())
    registry = dict(model.named_parameters())
    counts = {}
    for s, d_out in enumerate(model.cfg.widths, 1):
        counts[s] = registry[f"encoder/stage{s}/conv/weight"].data.size
        assert counts[s] == model.cfg.kernel_points * d_out
    detail(request, f"per stage {list(counts.values())}, total {sum(counts.values())}")
    assert sum(counts.values()) == 14400


# --- 7 ---------------------------------------------------------------------------

def _reference_knn(q, s, k):
    out = []
    for row in q:
        d = [float(((row - p) ** 2).sum()) for p in s]
        out.append(sorted(range(len(s)), key=lambda j: (d[j], j))[:k])
    return out


def _reference_fps(pos, k):
    d_all = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=-1)
    c = pos - pos.mean(axis=0)
    picks = [int(np.argmax((c * c).sum(axis=1)))]
    for _ in range(k - 1):
        mind = d_all[picks].min(axis=0)
        mind[picks] = -1.0
        picks.append(int(np.argmax(mind)))
    return picks


@pytest.mark.criterion(7, "invariance and brute-force geometry")
def test_criterion_7_invariance(request):
    rng = np.random.default_rng(0)
    small = dict(widths=(16, 32, 64, 128), lift_width=16, head_widths=(64, 32))
    cls_model = build_model(ModelConfig(**small), seed=0)
    seg_model = build_model(ModelConfig(task="segmentation", **small), seed=0)
    cloud = generate(SyntheticSpec("seg-composites", 512, 1, 0.01, 0))[1]
    perm = rng.permutation(len(cloud))
    shuffled = PointCloud(cloud.positions[perm])
    cls_err = np.max(np.abs(forward_classify(cls_model, shuffled) - forward_classify(cls_model, cloud)))
    seg_err = np.max(np.abs(forward_segment(seg_model, shuffled) - forward_segment(seg_model, cloud)[perm]))
    assert cls_err < 1e-6 and seg_err < 1e-6

    for n in (64, 512, 2048):
        pos = rng.integers(0, 8, size=(n, 3)).astype(float) if n == 512 else rng.normal(size=(n, 3))
        q = pos[rng.choice(n, 48, replace=False)]
        ref = _reference_knn(q, pos, 16)
        got = knn(q, pos, 16)
        assert [got.neighbors(i).tolist() for i in range(48)] == ref
        r = 0.9 if n != 512 else 2.0
        rad = radius_neighbors(q, pos, r, cap=32)
        want = [[j for j in row[:32]] for row in _reference_knn(q, pos, 32)]
        want = [[j for i, j in enumerate(row) if i == 0 or ((pos[j] - q[t]) ** 2).sum() <= r * r]
                for t, row in enumerate(want)]
        assert [rad.neighbors(i).tolist() for i in range(48)] == want
        assert farthest_point_sample(pos, n // 4).tolist() == _reference_fps(pos, n // 4)
    detail(request, f"cls logit drift {cls_err:.1e}, seg logit drift {seg_err:.1e}, geometry exact to 2048 points")


# --- 8 and 9 -----------------------------------------------------------------------

def _ablation_data():
    train = generate(SyntheticSpec("seg-composites", 512, 34, 0.01, 0))[:100]
    test = generate(SyntheticSpec("seg-composites", 512, 10, 0.01, 1))
    return train, test


@pytest.fixture(scope="module")
def ablation():
    start = time.perf_counter()
    train, test = _ablation_data()
    runs = {}
    for seed in ABLATION_SEEDS:
        for variant, on in (("full", True), ("none", False)):
            cfg = ModelConfig(task="segmentation", enable_phi=on, enable_varphi=on, **ABLATION_WIDTHS)
            model = build_model(cfg, seed=seed)
            tcfg = TrainConfig.for_task("segmentation", epochs=40, batch_size=10, seed=seed,
                                        augment=TrainConfig().augment)
            fit(model, train, tcfg)
            runs[variant, seed] = (model, evaluate(model, test)[2])
    return runs, test, time.perf_counter() - start


@pytest.mark.criterion(8, "desk-scale ablation: full DU beats no-phi/no-varphi by >= 1 point")
def test_criterion_8_ablation(request, ablation):
    runs, _, elapsed = ablation
    full = [100 * runs["full", s][1] for s in ABLATION_SEEDS]
    none = [100 * runs["none", s][1] for s in ABLATION_SEEDS]
    gap = float(np.median(full) - np.median(none))
    detail(request, f"median I.mIoU full {np.median(full):.2f} vs none {np.median(none):.2f} (gap {gap:+.2f}); "
                    f"full {[round(v, 2) for v in full]}, none {[round(v, 2) for v in none]}, {elapsed / 60:.1f} min")
    assert elapsed < 15 * 60
    assert gap >= 1.0


@pytest.mark.criterion(9, "final decoder DU raises boundary/interior smoothness ratio")
def test_criterion_9_smoothness(request, ablation):
    runs, test, _ = ablation
    rises = []
    summary = []
    for seed in ABLATION_SEEDS:
        model = runs["full", seed][0]
        before, after = [], []
        for cloud in test:
            rep = smoothness_probe(model, cloud, "decoder/stage4/du")
            before.append(rep.boundary_ratio("before"))
            after.append(rep.boundary_ratio("after"))
        rises.append(np.mean(after) > np.mean(before))
        summary.append(f"seed {seed}: {np.mean(before):.3f} -> {np.mean(after):.3f}")
    detail(request, "; ".join(summary))
    assert sum(rises) >= 2


# --- 10 --------------------------------------------------------------------------

@pytest.mark.criterion(10, "checkpoint, .duc and CLI round trips")
def test_criterion_10_round_trips(request, tmp_path):
    data = generate(SyntheticSpec("seg-composites", 256, 2, 0.01, 0))
    model = build_model(ModelConfig(task="segmentation", widths=(8, 16, 16, 32), lift_width=8), seed=0)
    tcfg = TrainConfig.for_task("segmentation", epochs=2, batch_size=3)
    res = fit(model, data, tcfg)
    logits = forward_segment(model, data[0])
    save_checkpoint(tmp_path / "m.ckpt", model, res.optimizer, tcfg, res.epoch)
    assert forward_segment(load_checkpoint(tmp_path / "m.ckpt").model, data[0]).tobytes() == logits.tobytes()

    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.normal(size=(50, 3)) * 1e-7, features=rng.normal(size=(50, 4)) * 1e9,
                       labels=rng.integers(0, 5, 50))
    write_cloud(cloud, tmp_path / "c.duc")
    back = read_cloud(tmp_path / "c.duc")
    assert back.positions.tobytes() == cloud.positions.tobytes()
    assert back.features.tobytes() == cloud.features.tobytes()
    assert np.array_equal(back.labels, cloud.labels)

    assert cli_main(["gen-data", "--family", "seg-composites", "--n", "128", "--per-class", "1",
                     "--out", str(tmp_path / "d")]) == 0
    outputs = []
    for i in range(2):
        run = tmp_path / f"run{i}"
        argv = ["train", "--task", "seg", "--data", str(tmp_path / "d"), "--out", str(run), "--epochs", "2",
                "--widths", "8,16,16,32", "--lift-width", "8", "--seed", "5"]
        assert subprocess.run([sys.executable, "-m", "dunet", *argv], capture_output=True).returncode == 0
        assert cli_main(["diffuse", "--diffusivity", "pm", "--steps", "20", "--seed", "5",
                         "--out", str(run / "diffuse.csv")]) == 0
        assert cli_main(["edge-experiment", "--out", str(run / "edge.csv")]) == 0
        assert cli_main(["smoothness", "--ckpt", str(run / "model.ckpt"), "--cloud",
                         str(tmp_path / "d" / "rocket_0000.duc"), "--out", str(run / "sm")]) == 0
        outputs.append({f: (run / f).read_bytes() for f in
                        ("metrics.csv", "diffuse.csv", "edge.csv", "sm_before.csv", "sm_after.csv")})
    assert outputs[0] == outputs[1]
    detail(request, "logits bit-identical after reload, .duc exact, 5 CSVs identical across seeded reruns")
