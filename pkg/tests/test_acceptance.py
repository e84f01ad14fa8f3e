"""Acceptance suite: twelve behavioural criteria, one pass/fail line each.

Every test prints `ACCEPTANCE nn PASS/FAIL <name> (<elapsed>)`; run with
`pytest tests/test_acceptance.py -v -s` to watch the lines appear.  Each
criterion checks the implementation against an independent oracle (brute
force, closed-form recurrence, or scripted state machine) rather than
against itself.
"""

import functools
import hashlib
import itertools
import math
import time

import numpy as np
import pytest
import torch

import eegjepa.pretrain as pretrain_mod
from eegjepa.data import (
    Example,
    SynthesisSpec,
    slice_continuous,
    stratified_folds,
    synthesize,
)
from eegjepa.errors import MaskingError
from eegjepa.finetune import DownstreamSpec, build_downstream, finetune, score
from eegjepa.harness import (
    DatasetHandle,
    PipelineSpec,
    ResultRow,
    enumerate_cells,
    rank_pipelines,
    run_grid,
)
from eegjepa.montage import Montage, sample_mask, spherical_cap_montage
from eegjepa.nets import (
    ClassifierHead,
    ContextualEncoder,
    LocalEncoder,
    LocalEncoderConfig,
    ModelConfig,
    Predictor,
    SpatialAggregate,
    load_checkpoint,
    save_checkpoint,
    token_count,
)
from eegjepa.pretrain import (
    EarlyStopper,
    PretrainConfig,
    build_models,
    pretrain_step,
    run_pretraining,
    validation_loss_from_checkpoint,
)
from eegjepa.seeding import derive_seed

TINY = ModelConfig(context_depth=1, predictor_depth=1, ff_dim=64)


def criterion(number, name):
    """Wrap a test so it prints one stable pass/fail line when it finishes."""

    def deco(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            try:
                fn(*args, **kwargs)
            except BaseException:
                elapsed = time.perf_counter() - start
                print(f"ACCEPTANCE {number:02d} FAIL {name} ({elapsed:.1f} s)", flush=True)
                raise
            elapsed = time.perf_counter() - start
            print(f"ACCEPTANCE {number:02d} PASS {name} ({elapsed:.1f} s)", flush=True)

        return run

    return deco


# ---------------------------------------------------------------------------
# 1. Spatial masking against brute-force distance filtering
# ---------------------------------------------------------------------------


@criterion(1, "mask geometry matches brute-force distance filtering")
def test_criterion_01_mask_geometry():
    rng = np.random.default_rng(101)
    fractions = (0.4, 0.6, 0.8)
    for _ in range(200):
        n = int(rng.integers(3, 11))
        positions = rng.uniform(-0.1, 0.1, size=(n, 3))
        montage = Montage(tuple(f"m{i}" for i in range(n)), positions)
        dist = np.linalg.norm(positions[:, None] - positions[None], axis=-1)
        radius_of = {f: f * dist.max() / 2.0 for f in fractions}
        masked_sets = {}
        for f in fractions:
            for center in range(n):
                want = {i for i in range(n) if dist[center, i] <= radius_of[f]}
                masked_sets[(f, center)] = want
                if len(want) < n:
                    spec = sample_mask(montage, f, 2, rng, center_channel=center)
                    assert spec.center_channel == center
                    assert set(spec.masked_channels) == want
                else:
                    with pytest.raises(MaskingError):
                        sample_mask(montage, f, 2, rng, center_channel=center)
        for center in range(n):
            assert (
                masked_sets[(0.4, center)]
                <= masked_sets[(0.6, center)]
                <= masked_sets[(0.8, center)]
            )


# ---------------------------------------------------------------------------
# 2. Tokenizer arithmetic across the whole supported length range
# ---------------------------------------------------------------------------


@criterion(2, "tokenizer arithmetic over the full length range")
def test_criterion_02_tokenizer_arithmetic():
    for n_samples in range(152, 4097):
        assert token_count(n_samples) == (n_samples - 152) // 128 + 1
    torch.manual_seed(2)
    encoder = LocalEncoder(LocalEncoderConfig()).eval()
    for n_samples, want in ((152, 1), (536, 4), (2072, 16)):
        with torch.no_grad():
            out = encoder(torch.zeros(1, n_samples))
        assert out.shape == (1, want, 64)
        # window count equals nominal seconds: 1.1875 s -> 1, 4.1875 s -> 4...
        assert n_samples / 128.0 == want + 0.1875
    # the convolution stack itself agrees with the formula across the range
    for n_samples in range(152, 4097, 97):
        with torch.no_grad():
            assert encoder(torch.zeros(1, n_samples)).shape[1] == token_count(n_samples)


# ---------------------------------------------------------------------------
# 3. Receptive-field locality (tolerance zero)
# ---------------------------------------------------------------------------


@criterion(3, "tokens outside a perturbed window are bit-identical")
def test_criterion_03_receptive_field_locality():
    rng = np.random.default_rng(303)
    torch.manual_seed(3)
    encoder = LocalEncoder(LocalEncoderConfig()).eval()
    for _ in range(100):
        n_samples = int(rng.integers(152, 1200))
        windows = token_count(n_samples)
        x = torch.from_numpy(rng.standard_normal((1, n_samples)).astype(np.float32))
        poked = int(rng.integers(0, n_samples))
        y = x.clone()
        y[0, poked] += 2.5
        with torch.no_grad():
            a = encoder(x)
            b = encoder(y)
        for w in range(windows):
            if not (128 * w <= poked < 128 * w + 152):
                assert torch.equal(a[0, w], b[0, w])


# ---------------------------------------------------------------------------
# 4. Permutation equivariance of the full-depth contextual encoder
# ---------------------------------------------------------------------------


@criterion(4, "contextual encoder is permutation-equivariant")
def test_criterion_04_permutation_equivariance():
    torch.manual_seed(4)
    encoder = ContextualEncoder(ModelConfig().context_config()).double().eval()
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(50):
        length = int(rng.integers(2, 65))
        x = torch.from_numpy(rng.standard_normal((1, length, 64)))
        perm = torch.from_numpy(rng.permutation(length))
        with torch.no_grad():
            base = encoder(x)
            permuted = encoder(x[:, perm])
        worst = max(worst, float((permuted - base[:, perm]).abs().max()))
    assert worst < 1e-5, f"max deviation {worst}"


# ---------------------------------------------------------------------------
# 5. Analytic gradients vs central finite differences
# ---------------------------------------------------------------------------


def _sampled_entries(module, n_params, rng):
    params = [p for p in module.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    picks = rng.choice(int(sizes.sum()), size=min(n_params, int(sizes.sum())),
                       replace=False)
    bounds = np.cumsum(sizes)
    out = []
    for flat in sorted(int(i) for i in picks):
        k = int(np.searchsorted(bounds, flat, side="right"))
        offset = flat - (0 if k == 0 else int(bounds[k - 1]))
        out.append((params[k], offset))
    return out


def _gradcheck(module, loss_fn, rng, step=1e-3, rel_tol=1e-3, n_params=20):
    module.zero_grad()
    loss_fn().backward()
    for param, offset in _sampled_entries(module, n_params, rng):
        analytic = 0.0 if param.grad is None else float(param.grad.reshape(-1)[offset])
        with torch.no_grad():
            flat = param.reshape(-1)
            keep = float(flat[offset])
            flat[offset] = keep + step
            hi = float(loss_fn())
            flat[offset] = keep - step
            lo = float(loss_fn())
            flat[offset] = keep
        fd = (hi - lo) / (2.0 * step)
        err = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)
        assert err < rel_tol, f"rel err {err:.2e} (analytic {analytic}, fd {fd})"


@criterion(5, "finite-difference gradient checks on every network")
def test_criterion_05_gradient_checks():
    torch.manual_seed(5)
    rng = np.random.default_rng(505)
    config = ModelConfig()

    local = LocalEncoder(config.local).double().eval()
    x = torch.from_numpy(rng.standard_normal((2, 400)))
    probe = torch.from_numpy(rng.standard_normal((2, 2, 64)))
    _gradcheck(local, lambda: (local(x) * probe).sum(), rng)

    context = ContextualEncoder(config.context_config()).double().eval()
    x_ctx = torch.from_numpy(rng.standard_normal((1, 12, 64)))
    probe_ctx = torch.from_numpy(rng.standard_normal((1, 12, 64)))
    _gradcheck(context, lambda: (context(x_ctx) * probe_ctx).sum(), rng)

    predictor = Predictor(config.predictor_config()).double().eval()
    memory = torch.from_numpy(rng.standard_normal((1, 10, 64)))
    queries = torch.from_numpy(rng.standard_normal((1, 5, 64)))
    probe_pred = torch.from_numpy(rng.standard_normal((1, 5, 64)))
    _gradcheck(predictor, lambda: (predictor(memory, queries) * probe_pred).sum(), rng)

    aggregate = SpatialAggregate(6, 4).double()
    x_agg = torch.from_numpy(rng.standard_normal((3, 6, 200)))
    probe_agg = torch.from_numpy(rng.standard_normal((3, 4, 200)))
    _gradcheck(aggregate, lambda: (aggregate.forward_batched(x_agg) * probe_agg).sum(), rng)

    head = ClassifierHead(40, 3).double()
    x_head = torch.from_numpy(rng.standard_normal((5, 40)))
    probe_head = torch.from_numpy(rng.standard_normal((5, 3)))
    _gradcheck(head, lambda: (head(x_head) * probe_head).sum(), rng)


# ---------------------------------------------------------------------------
# 6. Training-loop contracts on a synthetic corpus
# ---------------------------------------------------------------------------


@criterion(6, "latent-prediction loop contracts over 200 steps")
def test_criterion_06_training_loop_contracts():
    montage = spherical_cap_montage(8)
    subjects = synthesize(
        SynthesisSpec(montage=montage, n_subjects=4, duration_s=120.0), seed=66
    )
    examples = []
    for sub in subjects:
        examples.extend(slice_continuous(sub.continuous, 16.1875, 16.9))
    windows = token_count(examples[0].n_samples)
    total_tokens = montage.n_channels * windows
    assert (windows, total_tokens) == (16, 128)

    config = PretrainConfig(learning_rate=1e-3, batch_size=4, seed=66)
    torch.manual_seed(derive_seed(66, "model-init"))
    model, teacher = build_models(montage, config.model)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    student_seen, teacher_seen = [], []
    model.backbone.context.register_forward_pre_hook(
        lambda module, args: student_seen.append(int(args[0].shape[1]))
    )
    teacher.register_forward_pre_hook(
        lambda module, args: teacher_seen.append(int(args[0].shape[1]))
    )
    tracked_name = "layers.0.self_attn.in_proj_weight"
    teacher_tracked = dict(teacher.named_parameters())[tracked_name]
    student_tracked = dict(model.backbone.context.named_parameters())[tracked_name]

    rng = np.random.default_rng(derive_seed(66, "loop"))
    tensors = [torch.as_tensor(ex.samples, dtype=torch.float32) for ex in examples]
    losses = []
    expected_visible = []
    step = 0
    while step < 200:
        order = rng.permutation(len(tensors))
        for lo in range(0, len(order), config.batch_size):
            batch = [tensors[i] for i in order[lo : lo + config.batch_size]]
            masks = [
                sample_mask(montage, config.mask_diameter_fraction, windows, rng)
                for _ in batch
            ]
            expected_visible.extend(
                total_tokens - len(m.masked_channels) * windows for m in masks
            )
            before = teacher_tracked.detach().double().clone()
            losses.append(
                pretrain_step(model, teacher, optimizer, batch, masks, config, step)
            )
            # EMA recurrence on the post-step student (geometric decay law)
            blend = (
                config.ema_momentum * before
                + (1.0 - config.ema_momentum) * student_tracked.detach().double()
            )
            assert float((teacher_tracked.detach().double() - blend).abs().max()) < 1e-6
            step += 1
            if step >= 200:
                break

    processed = len(teacher_seen)
    assert teacher_seen == [total_tokens] * processed  # teacher: full sequence
    assert student_seen == expected_visible  # student context: visible only
    assert all(v < total_tokens for v in expected_visible)
    for p in teacher.parameters():
        assert not p.requires_grad and p.grad is None
    late = float(np.mean(losses[-5:]))
    assert late < 0.6 * losses[0], f"loss {losses[0]:.4f} -> {late:.4f}"


# ---------------------------------------------------------------------------
# 7. Early stopping against a scripted state machine
# ---------------------------------------------------------------------------


def _oracle_stop(values, patience, warmup=0):
    """Independent stopping oracle: (stop_epoch, best_epoch, best_value)."""
    best, best_epoch, since = math.inf, 0, 0
    for epoch, value in enumerate(values, start=1):
        if value < best:
            best, best_epoch, since = value, epoch, 0
        elif epoch > warmup:
            since += 1
        if since >= patience:
            return epoch, best_epoch, best
    return len(values), best_epoch, best


@criterion(7, "early stopping matches the scripted state machine")
def test_criterion_07_early_stopping(monkeypatch):
    # integration at pre-training patience (10): improvements at 1, 2, 3, 5
    scripted = [1.0, 0.9, 0.8, 0.85, 0.7] + [0.75] * 30
    want_stop, want_best_epoch, want_best = _oracle_stop(scripted, patience=10)
    assert (want_stop, want_best_epoch, want_best) == (15, 5, 0.7)

    feed = iter(scripted)
    monkeypatch.setattr(
        pretrain_mod, "evaluate_validation_loss", lambda *a, **k: next(feed)
    )
    montage = spherical_cap_montage(3)
    rng = np.random.default_rng(7)
    make = lambda: Example(samples=rng.standard_normal((3, 152)).astype(np.float32))
    config = PretrainConfig(
        model=TINY, batch_size=2, patience=10, max_epochs=40, seed=7,
        mask_diameter_fraction=0.8,
    )
    result = pretrain_mod.run_pretraining(
        montage, [make(), make()], [make()], config
    )
    assert result.epochs_run == want_stop
    assert result.best_epoch == want_best_epoch
    assert result.best_val_loss == want_best

    # fine-tuning configuration (patience 50, warm-up 10): 200 scripted
    # sequences against the oracle, including tie-heavy plateaus
    rng = np.random.default_rng(77)
    for _ in range(200):
        n = int(rng.integers(1, 120))
        values = [float(v) for v in rng.choice([0.5, 0.6, 0.7, 0.8], size=n)]
        stopper = EarlyStopper(patience=50, warmup_epochs=10)
        stop_epoch = len(values)
        for epoch, value in enumerate(values, start=1):
            stopper.update(epoch, value)
            if stopper.should_stop:
                stop_epoch = epoch
                break
        want = _oracle_stop(values, patience=50, warmup=10)
        assert (stop_epoch, stopper.best_epoch, stopper.best) == want


# ---------------------------------------------------------------------------
# 8. Freeze and warm-up contracts
# ---------------------------------------------------------------------------


def _digest(tensors):
    h = hashlib.blake2b(digest_size=16)
    for t in tensors:
        h.update(t.detach().numpy().tobytes())
    return h.hexdigest()


def _tone_epochs(rng, n_per_class, n_channels=4, n_samples=536, separation=3.0):
    t = np.arange(n_samples) / 128.0
    out = []
    for label in (0, 1):
        freq = 10.0 if label == 0 else 20.0
        for _ in range(n_per_class):
            x = rng.standard_normal((n_channels, n_samples))
            x = x + separation * np.sin(2 * np.pi * freq * t + rng.uniform(0, 6.28))
            out.append(Example(samples=x.astype(np.float32), label=label))
    return [out[i] for i in rng.permutation(len(out))]


def _small_checkpoint(seed=88):
    montage = spherical_cap_montage(4)
    rng = np.random.default_rng(seed)
    make = lambda: Example(samples=rng.standard_normal((4, 536)).astype(np.float32))
    config = PretrainConfig(model=TINY, batch_size=4, max_epochs=1, patience=3,
                            seed=seed)
    result = run_pretraining(montage, [make() for _ in range(4)],
                             [make(), make()], config)
    return montage, result.best_checkpoint


@criterion(8, "fine-tuning freeze and warm-up bit-identity")
def test_criterion_08_freeze_and_warmup():
    montage, checkpoint = _small_checkpoint()
    rng = np.random.default_rng(812)
    epochs = _tone_epochs(rng, n_per_class=12)
    train, val, test = epochs[:16], epochs[16:20], epochs[20:]

    # new-layers-only: pre-trained tensors never move, new layers do
    spec = DownstreamSpec(
        architecture="pre_local", strategy="new", max_epochs=6, patience=10,
        batch_size=8, seed=81, model=TINY,
    )
    torch.manual_seed(81)
    model = build_downstream(checkpoint, spec, montage, 536)
    frozen_before = _digest(model.pretrained_parameters())
    head_before = _digest(model.new_parameters())
    finetune(model, spec, train, val, test)
    assert _digest(model.pretrained_parameters()) == frozen_before
    assert _digest(model.new_parameters()) != head_before

    # full: bit-identical through the 10-epoch warm-up, changed afterwards
    spec = DownstreamSpec(
        architecture="pre_local", strategy="full", warmup_epochs=10,
        max_epochs=13, patience=30, batch_size=8, seed=82, model=TINY,
    )
    torch.manual_seed(82)
    model = build_downstream(checkpoint, spec, montage, 536)
    pristine = _digest(model.pretrained_parameters())
    digests = []
    model.register_forward_pre_hook(
        lambda module, args: digests.append(_digest(module.pretrained_parameters()))
    )
    finetune(model, spec, train, val, test)
    batches = math.ceil(len(train) / spec.batch_size)  # 2
    per_epoch = batches + 1  # train forwards plus one validation forward
    # all forwards in epochs 1..10, plus epoch 11's first (pre-step) forward
    boundary = 10 * per_epoch + 1
    assert len(digests) == spec.max_epochs * per_epoch + 1  # + final test forward
    assert all(d == pristine for d in digests[:boundary])
    assert digests[boundary] != pristine  # first post-warm-up step has landed


# ---------------------------------------------------------------------------
# 9. Downstream learnability with a shuffled-label control
# ---------------------------------------------------------------------------


def _fold_scores(montage, checkpoint, epochs, seed):
    labels = [ex.label for ex in epochs]
    folds = stratified_folds(labels, 5, np.random.default_rng(seed))
    scores = []
    for fold_index, fold in enumerate(folds):
        spec = DownstreamSpec(
            architecture="pre_local", strategy="full", warmup_epochs=2,
            patience=5, max_epochs=40, batch_size=16,
            seed=derive_seed(seed, "fold", fold_index), model=TINY,
        )
        torch.manual_seed(spec.seed)
        model = build_downstream(checkpoint, spec, montage, 536)
        result = finetune(
            model,
            spec,
            [epochs[i] for i in fold.train_indices],
            [epochs[i] for i in fold.val_indices],
            [epochs[i] for i in fold.test_indices],
        )
        scores.append(result.score)
    return scores


@criterion(9, "downstream learnability beats a shuffled-label control")
def test_criterion_09_downstream_learnability():
    montage = spherical_cap_montage(6)
    rng = np.random.default_rng(99)
    pre_examples = []
    for sub in synthesize(
        SynthesisSpec(montage=montage, n_subjects=4, duration_s=60.0), seed=99
    ):
        pre_examples.extend(slice_continuous(sub.continuous, 4.1875, 4.2))
    config = PretrainConfig(
        model=TINY, learning_rate=1e-3, batch_size=8, patience=2, max_epochs=4,
        seed=99,
    )
    result = run_pretraining(
        montage, pre_examples[4:], pre_examples[:4], config
    )

    epochs = _tone_epochs(rng, n_per_class=20, n_channels=6)
    real = _fold_scores(montage, result.best_checkpoint, epochs, seed=91)
    assert float(np.mean(real)) >= 0.90, f"fold accuracies {real}"

    shuffled_labels = rng.permutation([ex.label for ex in epochs])
    control_epochs = [
        Example(samples=ex.samples, label=int(lbl))
        for ex, lbl in zip(epochs, shuffled_labels)
    ]
    control = _fold_scores(montage, result.best_checkpoint, control_epochs, seed=92)
    assert 0.40 <= float(np.mean(control)) <= 0.60, f"control accuracies {control}"


# ---------------------------------------------------------------------------
# 10. AUC against exhaustive pairwise brute force
# ---------------------------------------------------------------------------


def _brute_force_auc(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0
               for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


@criterion(10, "AUC equals brute-force pairwise counting")
def test_criterion_10_auc_oracle():
    # worked example: one positive/negative tie at 0.4 contributes one half
    scores = np.array([0.9, 0.4, 0.4, 0.1])
    labels = np.array([1, 1, 0, 0])
    assert _brute_force_auc(scores, labels) == 0.875
    assert score(scores, labels, "auc") == 0.875

    def check(values, bits):
        got = score(np.array(values), np.array(bits), "auc")
        want = _brute_force_auc(values, bits)
        assert abs(got - want) < 1e-12, f"{values} {bits}: {got} vs {want}"

    # exhaustive on two tie-capable alphabets at small sizes
    for n in (2, 3, 4):
        for values in itertools.product((0.1, 0.4, 0.6, 0.9), repeat=n):
            for bits in itertools.product((0, 1), repeat=n):
                if 0 < sum(bits) < n:
                    check(values, bits)
    for n in (2, 3, 4, 5):
        for values in itertools.product((0.0, 0.5, 1.0), repeat=n):
            for bits in itertools.product((0, 1), repeat=n):
                if 0 < sum(bits) < n:
                    check(values, bits)
    # randomized tie-heavy coverage up to size 8
    rng = np.random.default_rng(1010)
    for _ in range(1200):
        n = int(rng.integers(6, 9))
        values = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], size=n)
        bits = np.zeros(n, dtype=int)
        bits[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = 1
        check(list(values), list(bits))


# ---------------------------------------------------------------------------
# 11. Grid bookkeeping: 105 folds, rank sums, byte-identical resume
# ---------------------------------------------------------------------------


def _benchmark_shaped_cells():
    datasets = [
        DatasetHandle(
            name=paradigm,
            paradigm=paradigm,
            montage=spherical_cap_montage(4),
            epochs_by_subject={f"s{i:02d}": [] for i in range(7)},
            n_folds=5,
        )
        for paradigm in ("mi", "erp", "ssvep")
    ]
    pipelines = [
        PipelineSpec("16s-40%", "contextual", "full"),
        PipelineSpec("none", "contextual", "full"),
    ]
    return pipelines, enumerate_cells(pipelines, datasets)


def _stub_result(cell):
    h = derive_seed(11, cell.pipeline.name, cell.dataset, cell.subject, cell.fold)
    return ResultRow(
        pipeline=cell.pipeline.name,
        dataset=cell.dataset,
        subject=cell.subject,
        fold=cell.fold,
        metric="auc" if cell.dataset == "erp" else "accuracy",
        score=(h % 1000) / 1000.0,
        epochs=int(h % 40) + 1,
    )


class _InterruptAfter:
    def __init__(self, budget):
        self.budget = budget
        self.calls = 0

    def __call__(self, cell):
        if self.calls >= self.budget:
            raise RuntimeError("interrupted")
        self.calls += 1
        return _stub_result(cell)


@criterion(11, "105 folds per pipeline, rank sums, byte-identical resume")
def test_criterion_11_grid_bookkeeping(tmp_path):
    pipelines, cells = _benchmark_shaped_cells()
    assert len(cells) == 2 * 105  # 3 paradigms x 7 subjects x 5 folds each

    full = tmp_path / "full.csv"
    rows = run_grid(cells, _stub_result, full)
    per_pipeline = {p.name: 0 for p in pipelines}
    for row in rows:
        per_pipeline[row.pipeline] += 1
    assert per_pipeline == {p.name: 105 for p in pipelines}

    table = rank_pipelines(rows)
    assert len(table.fold_keys) == 105
    n = len(table.pipelines)
    assert (table.ranks.sum(axis=1) == n * (n + 1) // 2).all()

    want = full.read_bytes()
    for k in (1, 52, 104, 209):
        part = tmp_path / f"part{k}.csv"
        with pytest.raises(RuntimeError):
            run_grid(cells, _InterruptAfter(k), part)
        run_grid(cells, _stub_result, part)
        assert part.read_bytes() == want


# ---------------------------------------------------------------------------
# 12. Checkpoint round-trip reproduces the validation loss bit-for-bit
# ---------------------------------------------------------------------------


@criterion(12, "checkpoint round-trip reproduces validation loss")
def test_criterion_12_checkpoint_round_trip(tmp_path):
    montage = spherical_cap_montage(4)
    rng = np.random.default_rng(12)
    make = lambda: Example(samples=rng.standard_normal((4, 536)).astype(np.float32))
    train = [make() for _ in range(6)]
    val = [make() for _ in range(3)]
    config = PretrainConfig(model=TINY, batch_size=4, max_epochs=2, patience=3,
                            seed=12)
    result = run_pretraining(montage, train, val, config, out_dir=tmp_path / "run")
    assert result.best_path is not None and result.best_path.is_file()

    reloaded = load_checkpoint(result.best_path)
    replayed = validation_loss_from_checkpoint(reloaded, val)
    assert replayed == result.best_val_loss  # bit-for-bit, no tolerance

    # and the container itself survives a save-load-save cycle byte-identically
    save_checkpoint(tmp_path / "again.ckpt", reloaded)
    assert (tmp_path / "again.ckpt").read_bytes() == result.best_path.read_bytes()
