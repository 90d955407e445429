import numpy as np
import pytest
import torch

from sedt.corpus import default_spec, synth_clip
from sedt.data import prepare
from sedt.finetuning import (COPY_GROUPS, REINIT_GROUPS, FinetuneConfig, InferenceConfig, TransferError,
                             TransferPolicy, decode_predictions, finetune, infer, transfer_weights)
from sedt.losses import LossWeights
from sedt.network import SEDT, ModelConfig, param_group

SMALL = ModelConfig(d_model=32, n_encoder_blocks=1, n_decoder_blocks=1, n_heads=2, n_queries=6,
                    n_patches=2, n_classes=3, backbone_channels=(8, 8, 16, 16), ffn_hidden=32)
NAMES = ["beep", "chirp", "hiss"]


def pretrained_state(seed=11):
    torch.manual_seed(seed)
    m = SEDT(SMALL, pretrain=True)
    # push every tensor away from any fresh draw
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.123)
    return m.state_dict()


@pytest.fixture(scope="module")
def tiny_data():
    spec = default_spec()
    strong = [synth_clip(spec, s, f"s{s}")[0] for s in range(6)]
    weak = [synth_clip(spec, 50 + s, f"w{s}", "weak")[0] for s in range(4)]
    val = [synth_clip(spec, 90 + s, f"v{s}")[0] for s in range(3)]
    _, (tr, v) = prepare(spec, strong + weak, [val])
    return tr, v


class TestTransfer:
    def test_copy_and_reinit_contract(self):
        state = pretrained_state()
        model = transfer_weights(state, SMALL, seed=5)
        for name, value in model.state_dict().items():
            group = param_group(name)
            if group in COPY_GROUPS:
                assert torch.equal(value, state[name]), name
            else:
                assert group in REINIT_GROUPS
                if name in state:
                    assert not torch.equal(value, state[name]), name
        # finetune-only tensors are absent from the pretraining checkpoint
        assert "audio_query" not in state and not any(k.startswith("tagging_head") for k in state)

    def test_reinit_equals_fresh_seeded_draw(self):
        model = transfer_weights(pretrained_state(), SMALL, seed=5)
        torch.manual_seed(5)
        fresh = SEDT(SMALL).state_dict()
        for name, value in model.state_dict().items():
            if param_group(name) in REINIT_GROUPS:
                assert torch.equal(value, fresh[name]), name

    def test_shape_mismatch_names_group(self):
        state = pretrained_state()
        state["boundary_head.layers.0.weight"] = torch.zeros(3, 3)
        with pytest.raises(TransferError, match="boundary_head"):
            transfer_weights(state, SMALL)

    def test_missing_group(self):
        state = {k: v for k, v in pretrained_state().items() if not k.startswith("decoder")}
        with pytest.raises(TransferError, match="decoder"):
            transfer_weights(state, SMALL)

    def test_policy_overlap_rejected(self):
        with pytest.raises(ValueError):
            TransferPolicy(copy={"backbone", "class_head"}, reinitialize={"class_head"})

    def test_non_default_policy_flagged(self):
        policy = TransferPolicy(copy=set(COPY_GROUPS) - {"boundary_head"},
                                reinitialize=set(REINIT_GROUPS) | {"boundary_head"})
        assert not policy.is_default()
        assert TransferPolicy().is_default()
        state = pretrained_state()
        model = transfer_weights(state, SMALL, policy, seed=0)
        assert not torch.equal(model.state_dict()["boundary_head.layers.0.weight"],
                               state["boundary_head.layers.0.weight"])


class TestFinetune:
    def test_zero_tag_weight_leaves_tagging_head(self, tiny_data):
        tr, _ = tiny_data
        strong_only = tr.subset([i for i, r in enumerate(tr.records) if r.annotation_kind == "strong"])
        torch.manual_seed(0)
        model = SEDT(SMALL)
        before = {k: v.clone() for k, v in model.tagging_head.state_dict().items()}
        aq = model.audio_query.detach().clone()
        finetune(model, strong_only, FinetuneConfig(epochs=2, batch_size=3, loss=LossWeights(lambda_at=0.0)))
        for k, v in model.tagging_head.state_dict().items():
            assert torch.equal(v, before[k])
        assert torch.equal(model.audio_query.detach(), aq)

    def test_determinism(self, tiny_data):
        tr, v = tiny_data
        logs, states = [], []
        for _ in range(2):
            torch.manual_seed(0)
            model = SEDT(SMALL)
            logs.append(finetune(model, tr, FinetuneConfig(epochs=2, batch_size=4, seed=3), v))
            states.append(model.state_dict())
        assert logs[0] == logs[1]
        assert all(torch.equal(states[0][k], states[1][k]) for k in states[0])
        assert "val_eb_f1" in logs[0][-1]

    def test_weak_only_batch_trains_tagging_only(self, tiny_data):
        tr, _ = tiny_data
        weak = tr.subset([i for i, r in enumerate(tr.records) if r.annotation_kind == "weak"])
        torch.manual_seed(0)
        model = SEDT(SMALL)
        before = model.boundary_head.layers[-1].weight.detach().clone()
        log = finetune(model, weak, FinetuneConfig(epochs=1, batch_size=4))
        assert set(log[0]) == {"epoch", "loss_at", "loss_total"}
        assert torch.equal(model.boundary_head.layers[-1].weight.detach(), before)


def probs_for(classes, conf, n_cls=3):
    out = np.full((len(classes), n_cls + 1), 0.0)
    for i, (c, s) in enumerate(zip(classes, conf)):
        out[i, c] = s
        rest = [j for j in range(n_cls + 1) if j != c]
        out[i, rest] = (1 - s) / len(rest)
    return out


class TestDecode:
    def test_all_background(self):
        probs = probs_for([3, 3, 3], [0.9, 0.8, 0.99])
        events, _ = decode_predictions(probs, np.full((3, 2), 0.5), np.ones(3), NAMES, 10.0)
        assert events == []

    def test_nms_keeps_higher_confidence(self):
        # IOU of [0.1, 0.3] and [0.1, 0.28] is 0.9
        probs = probs_for([0, 0], [0.8, 0.9])
        boxes = np.array([[0.2, 0.2], [0.19, 0.18]])
        events, _ = decode_predictions(probs, boxes, np.ones(3), NAMES, 10.0)
        assert len(events) == 1
        assert events[0].score == pytest.approx(0.9)
        assert events[0].onset_sec == pytest.approx(1.0) and events[0].offset_sec == pytest.approx(2.8)

    def test_nms_is_per_class(self):
        probs = probs_for([0, 1], [0.8, 0.9])
        boxes = np.array([[0.2, 0.2], [0.2, 0.2]])
        events, _ = decode_predictions(probs, boxes, np.ones(3), NAMES, 10.0)
        assert sorted(e.label for e in events) == ["beep", "chirp"]

    def test_fusion_filter(self):
        probs = probs_for([0, 1], [0.9, 0.9])
        boxes = np.array([[0.2, 0.2], [0.6, 0.2]])
        tags = np.array([0.05, 0.9, 0.1])
        events, tag_list = decode_predictions(probs, boxes, tags, NAMES, 10.0)
        assert [e.label for e in events] == ["chirp"]
        assert tag_list == [("chirp", pytest.approx(0.9))]
        kept, _ = decode_predictions(probs, boxes, tags, NAMES, 10.0, InferenceConfig(fusion="none"))
        assert len(kept) == 2

    def test_fusion_rescale(self):
        probs = probs_for([0], [0.9])
        events, _ = decode_predictions(probs, np.array([[0.5, 0.2]]), np.array([0.6, 0, 0]), NAMES, 10.0,
                                       InferenceConfig(fusion="rescale"))
        assert events[0].score == pytest.approx(0.54)

    def test_event_threshold(self):
        probs = probs_for([0], [0.45])
        assert decode_predictions(probs, np.array([[0.5, 0.2]]), np.ones(3), NAMES, 10.0)[0] == []

    def test_order_independent(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            probs = rng.dirichlet(np.ones(4) * 0.3, size=6)
            boxes = rng.uniform(0.05, 0.95, size=(6, 2))
            perm = rng.permutation(6)
            a, _ = decode_predictions(probs, boxes, np.ones(3), NAMES, 10.0)
            b, _ = decode_predictions(probs[perm], boxes[perm], np.ones(3), NAMES, 10.0)
            assert a == b
            for e in a:
                assert 0.0 <= e.onset_sec < e.offset_sec <= 10.0

    def test_clamped_to_clip(self):
        probs = probs_for([2], [0.95])
        events, _ = decode_predictions(probs, np.array([[0.95, 0.3]]), np.ones(3), NAMES, 10.0)
        assert events[0].offset_sec == pytest.approx(10.0)
        assert events[0].onset_sec == pytest.approx(8.0)


def test_infer_deterministic(tiny_data):
    _, v = tiny_data
    torch.manual_seed(0)
    model = SEDT(SMALL)
    loose = InferenceConfig(tau_event=0.0, tau_tag=0.0)
    assert infer(model, v, loose) == infer(model, v, loose)
    assert set(infer(model, v)) == {r.clip_id for r in v.records}
