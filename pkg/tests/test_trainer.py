import csv
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from flowsr import trainer
from flowsr.errors import NumericalError, ValidationError
from flowsr.io import load_checkpoint
from flowsr.losses import Variant
from flowsr.nets import DiscriminatorSpec, GeneratorSpec, init_generator
from flowsr.trainer import PatchDataset, TrainConfig, train_stage1, train_stage2
from flowsr.volume import Region

TINY_G = GeneratorSpec(n_rrdb=1, width=4, n_hr_blocks=0, growth=2, branch_width=2)
TINY_D = DiscriminatorSpec(n_down_blocks=2, width=4, hidden=6)


def tiny_dataset(n, seed):
    rng = np.random.default_rng(seed)
    labels = np.zeros((n, 24, 24, 24), np.uint8)
    labels[:, 4:20, 4:20, 4:20] = Region.BOUNDARY
    labels[:, 6:18, 6:18, 6:18] = Region.CORE
    x_hr = rng.normal(scale=0.5, size=(n, 24, 24, 24, 3)) * (labels > 0)[..., None]
    x_lr = x_hr.reshape(n, 12, 2, 12, 2, 12, 2, 3).mean(axis=(2, 4, 6))
    return PatchDataset(x_lr, x_hr, labels)


def tiny_cfg(**kw):
    base = dict(epochs_stage1=2, epochs_stage2=2, batch_size=2, seed=5, generator=TINY_G, discriminator=TINY_D,
                lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return tiny_dataset(4, 0), tiny_dataset(2, 1)


def same_params(a, b):
    return list(a) == list(b) and all(torch.equal(a[k], b[k]) for k in a)


def test_zero_epochs_returns_initial(data):
    cfg = tiny_cfg(epochs_stage1=0)
    theta, run = train_stage1(cfg, data[0])
    init = init_generator(TINY_G, np.random.default_rng([cfg.seed, 11]), cfg.dtype)
    assert same_params(theta, init) and run.records == []


def test_deterministic(data):
    a, ra = train_stage1(tiny_cfg(), *data)
    b, rb = train_stage1(tiny_cfg(), *data)
    assert same_params(a, b)
    assert [r.mre for r in ra.records] == [r.mre for r in rb.records]
    c, _ = train_stage1(tiny_cfg(seed=6), *data)
    assert not same_params(a, c)


def test_records_and_totals(data):
    cfg = tiny_cfg()
    theta, run = train_stage1(cfg, *data)
    g, d, run = train_stage2(cfg, data[0], theta, data[1], resume=run)
    assert [(r.epoch, r.stage, r.split) for r in run.records] == [
        (e, s, sp) for e, s in ((1, 1), (2, 1), (3, 2), (4, 2)) for sp in ("train", "val")]
    lcfg = cfg.loss_config()
    for r in run.records:
        lam = lcfg.lambda_g if r.stage == 2 else 0.0
        L = r.losses
        assert L.total_g == pytest.approx(L.data_loss + lam * L.adv_g + lcfg.mu_g * L.l2_g, rel=1e-9, abs=1e-12)
        assert math.isfinite(r.mre)
    assert run.rows("val")[-1].losses.adv_d != 0


def test_lambda_zero_retraces_stage1(data):
    cfg = tiny_cfg(epochs_stage1=2, epochs_stage2=2, lambda_g=0.0)
    theta, run = train_stage1(cfg, data[0])
    g2, _, _ = train_stage2(cfg, data[0], theta, resume=run)
    longer, _ = train_stage1(replace(cfg, epochs_stage1=4), data[0])
    assert same_params(g2, longer)
    # disc_only has the same effect whatever lambda_g says
    cfg_d = replace(cfg, lambda_g=1e-2, disc_only=True)
    theta, run = train_stage1(cfg_d, data[0])
    g3, _, _ = train_stage2(cfg_d, data[0], theta, resume=run)
    assert same_params(g3, longer)


@pytest.mark.parametrize("variant", list(Variant))
def test_adversarial_feedback_changes_generator(data, variant):
    cfg = tiny_cfg(variant=variant, lambda_g=1.0, epochs_stage2=1)
    theta, run = train_stage1(cfg, data[0])
    g_adv, _, _ = train_stage2(cfg, data[0], theta, resume=trainer._clone_run(run))
    g_base, _, _ = train_stage2(replace(cfg, disc_only=True), data[0], theta, resume=run)
    assert not same_params(g_adv, g_base)


def test_checkpoints(tmp_path, data):
    cfg = tiny_cfg()
    theta, run = train_stage1(cfg, data[0], checkpoint_dir=tmp_path)
    g, d, _ = train_stage2(cfg, data[0], theta, checkpoint_dir=tmp_path, resume=run)
    assert same_params(load_checkpoint(tmp_path / "stage2_generator.f4dw"), g)
    assert same_params(load_checkpoint(tmp_path / "stage2_discriminator.f4dw"), d)
    assert set(load_checkpoint(tmp_path / "stage1_generator.f4dw")) == set(g)


def test_errors(data):
    empty = PatchDataset.from_pairs([])
    with pytest.raises(ValidationError, match="empty"):
        train_stage1(tiny_cfg(), empty)
    wrong = init_generator(GeneratorSpec(n_rrdb=2, width=4, n_hr_blocks=0), np.random.default_rng(0))
    with pytest.raises(ValidationError, match="structure"):
        train_stage2(tiny_cfg(), data[0], wrong)
    with pytest.raises(ValidationError):
        tiny_cfg(batch_size=0)
    with pytest.raises(ValidationError):
        tiny_cfg(epochs_stage1=-1)
    bad = tiny_dataset(2, 3)
    bad.x_lr[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError):
        train_stage1(tiny_cfg(), bad)


def test_patch_mre():
    labels = torch.tensor([[0, 1], [2, 2]])
    hr = torch.ones(2, 2, 3)
    sr = hr.clone()
    sr[0, 0] = 100.0  # non-fluid voxel ignored
    assert trainer.patch_mre(sr, hr, labels) == 0.0
    assert math.isnan(trainer.patch_mre(sr, hr, torch.zeros(2, 2, dtype=torch.long)))


def test_training_log(tmp_path, data):
    cfg = tiny_cfg(lambda_g=1e-3)
    theta, run = train_stage1(cfg, *data)
    _, _, run = train_stage2(cfg, data[0], theta, data[1], resume=run)
    trainer.write_training_log(tmp_path / "log.csv", run)
    rows = trainer.read_training_log(tmp_path / "log.csv")
    assert list(rows[0]) == trainer.LOG_FIELDS
    assert [r["variant"] for r in rows] == ["none"] * 4 + ["wasserstein"] * 4
    assert rows[-1]["lambda_g"] == "0.001"
    assert float(rows[-1]["mre"]) == run.records[-1].mre


def test_stability_suite(tmp_path, data):
    cfg = tiny_cfg(epochs_stage1=1, epochs_stage2=1)
    rows, runs = trainer.run_stability_suite(cfg, data[0], data[1], variants=("vanilla",), lambdas=(1e-3,),
                                             out_dir=tmp_path)
    assert [(r["variant"], r["lambda_g"]) for r in rows] == [("baseline", 0.0), ("vanilla", 1e-3)]
    assert rows[0]["data_loss_ratio"] == 1.0
    with open(tmp_path / "stability_summary.csv") as f:
        table = list(csv.DictReader(f))
    assert [t["lambda_g"] for t in table] == ["0.0", "0.001"]
    assert (tmp_path / "log_vanilla_0.001.csv").exists() and (tmp_path / "log_wasserstein_0.csv").exists()
    # cells share one warm start, so their first stage-2 batch sees the same generator
    assert runs[("vanilla", 1e-3)].records[:2] == runs[("wasserstein", 0.0)].records[:2]


def phantom_dataset(radius, seed, count):
    from flowsr.mrsim import AcquisitionConfig, synthesize
    from flowsr.patching import extract_pairs
    from flowsr.phantom import PhantomSpec, make_phantom

    v, m, mask = make_phantom(PhantomSpec(dims=(48, 48, 48), tube_radius=radius, v_peak=1.2))
    lr, _ = synthesize(v, m, mask, AcquisitionConfig(seed=seed))
    return PatchDataset.from_pairs(extract_pairs(v, lr, mask, count, np.random.default_rng(seed)))


# training and validation phantoms differ in vessel radius
GATE_CFG = TrainConfig(epochs_stage1=20, batch_size=2, generator=GeneratorSpec(n_rrdb=1, width=8, n_hr_blocks=0))


def test_stage1_reduces_validation_error():
    train, val = phantom_dataset(7.0, 0, 128), phantom_dataset(6.0, 1, 8)
    _, run = train_stage1(GATE_CFG, train, val)
    mre = [r.mre for r in run.rows("val")]
    print(f"stage-1 val MRE epoch 1 {mre[0]:.2f}%, epoch 20 {mre[-1]:.2f}%, ratio {mre[-1] / mre[0]:.3f}")
    assert mre[-1] < 0.5 * mre[0]
