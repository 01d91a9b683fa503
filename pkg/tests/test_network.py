import numpy as np
import pytest
import torch

from spacepose.network import (ModelConfig, NetworkContractError, PretrainedWeightsUnavailable,
                               adapt_first_conv, build_model, count_parameters, forward_orientation,
                               forward_pose, forward_translation)
from spacepose.losses import center_loss, position_loss, rotation_loss
from spacepose.heatmap import check_normalized


def tiny(**kw):
    base = dict(input_size=(64, 64), crop_size=32, heat_channels=4, decoder_width=8, base_width=8,
                head_width=16, k_object=300.0)
    return ModelConfig(**{**base, **kw})


def images(n=2, size=(64, 64), seed=0):
    return torch.rand(n, 1, *size, generator=torch.Generator().manual_seed(seed))


def test_translation_output_shapes_and_normalized_heatmap():
    model = build_model(tiny())
    out = forward_translation(model, images())
    assert out.t_pred.shape == (2, 3)
    assert out.heatstack.shape == (2, 4, 64, 64)
    assert out.center_pred.shape == (2, 2)
    check_normalized(out.heatmap, 1e-4)


def test_non_square_input():
    model = build_model(tiny(input_size=(48, 80)))
    out = forward_translation(model, images(size=(48, 80)))
    assert out.heatmap.shape == (2, 48, 80)


def test_shape_contract_errors():
    model = build_model(tiny())
    with pytest.raises(NetworkContractError):
        forward_translation(model, images(size=(32, 32)))
    with pytest.raises(NetworkContractError):
        forward_orientation(model, torch.rand(1, 3, 32, 32))


def test_orientation_unit_quaternion_even_on_blank_crop():
    model = build_model(tiny()).eval()
    q = forward_orientation(model, torch.zeros(3, 1, 32, 32))
    np.testing.assert_allclose(q.norm(dim=-1).detach().numpy(), 1.0, atol=1e-6)
    assert torch.isfinite(q).all()


def _rotation_grads(hc: bool):
    model = build_model(tiny(hc_enabled=hc))
    model.train()
    x = images(4)
    _, q_pred, _, _ = forward_pose(model, x, mode="train")
    q = torch.tensor([[1.0, 0.0, 0.0, 0.0]]).expand(4, 4)
    rotation_loss(q, q_pred).backward()
    return {n: p.grad for n, p in model.translation.named_parameters()}


def test_hc_off_rotation_loss_gives_zero_translation_gradient():
    grads = _rotation_grads(False)
    assert all(g is None or float(g.abs().max()) == 0.0 for g in grads.values())


def test_hc_on_rotation_loss_reaches_translation_weights():
    grads = _rotation_grads(True)
    assert any(g is not None and float(g.abs().max()) > 0 for g in grads.values())


def test_translation_losses_reach_both_heads():
    model = build_model(tiny())
    out = forward_translation(model, images())
    t = torch.tensor([[0.0, 0.0, 10.0]] * 2)
    c = torch.zeros(2, 2)
    loss = position_loss(t, out.t_pred) + center_loss(c, out.center_pred, out.heatmap)[2]
    loss.backward()
    assert model.translation.position_head[-1].weight.grad.abs().sum() > 0
    assert model.translation.to_heat.weight.grad.abs().sum() > 0


def test_build_model_deterministic():
    a, b = build_model(tiny(), seed=3), build_model(tiny(), seed=3)
    for (na, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb), na
    c = build_model(tiny(), seed=4)
    assert not torch.equal(a.translation.encoder.conv1.weight, c.translation.encoder.conv1.weight)


def test_build_model_does_not_touch_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(1)
    torch.manual_seed(0)
    build_model(tiny())
    assert torch.equal(torch.rand(1), expected)


def test_parameter_count_grows_with_backbone():
    small = count_parameters(build_model(tiny()))
    r18 = count_parameters(build_model(tiny(backbone="resnet18")))
    r50 = count_parameters(build_model(tiny(backbone="resnet50")))
    assert small < r18 < r50


def test_hc_adds_orientation_input_channels():
    assert tiny(hc_enabled=True).orientation_channels == 5
    assert tiny().orientation_channels == 1


def test_adapt_first_conv_gray_and_heat_channels():
    w = torch.randn(8, 3, 7, 7)
    new = adapt_first_conv(w, 1, 5)
    assert new.shape == (8, 5, 7, 7)
    assert float(new[:, :4].abs().max()) == 0.0
    # gray replicated to RGB gives identical activations
    x = torch.rand(1, 1, 16, 16)
    a = torch.nn.functional.conv2d(x.expand(-1, 3, -1, -1), w)
    b = torch.nn.functional.conv2d(torch.cat([torch.zeros(1, 4, 16, 16), x], 1), new)
    assert torch.allclose(a, b, atol=1e-5)
    with pytest.raises(NetworkContractError):
        adapt_first_conv(torch.randn(8, 1, 3, 3), 1, 1)


def test_pretrained_missing_raises_with_instructions(tmp_path):
    cfg = tiny(backbone="resnet18", position_init="pretrained", pretrained_path=str(tmp_path / "none.pth"))
    with pytest.raises(PretrainedWeightsUnavailable, match="download.pytorch.org"):
        build_model(cfg)
    with pytest.raises(PretrainedWeightsUnavailable):
        build_model(tiny(orientation_init="pretrained"))


def test_pretrained_loads_local_state(tmp_path):
    import torchvision

    torch.manual_seed(0)
    state = torchvision.models.resnet18(weights=None).state_dict()
    path = tmp_path / "r18.pth"
    torch.save(state, path)
    cfg = tiny(backbone="resnet18", position_init="pretrained", orientation_init="pretrained",
               hc_enabled=True, pretrained_path=str(path))
    model = build_model(cfg)
    assert torch.equal(model.translation.encoder.layer1[0].conv1.weight, state["layer1.0.conv1.weight"])
    conv = model.orientation.encoder.conv1.weight
    assert conv.shape[1] == 5
    assert torch.allclose(conv[:, -1], state["conv1.weight"].sum(1))


def test_forward_pose_boxes_follow_depth():
    model = build_model(tiny()).eval()
    t, q, out, boxes = forward_pose(model, images())
    z = t[:, 2].clamp_min(0.5)
    assert torch.allclose(boxes[:, 2], 300.0 / z)
    assert not boxes.requires_grad


def test_forward_pose_cda_requires_rng():
    model = build_model(tiny())
    with pytest.raises(ValueError):
        forward_pose(model, images(), mode="train", cda_r=0.15)


def test_default_config_orientation_on_full_size_crop():
    model = build_model(ModelConfig()).eval()
    with torch.no_grad():
        q = forward_orientation(model, torch.rand(1, 1, 224, 224, generator=torch.Generator().manual_seed(0)))
    assert q.shape == (1, 4)
    assert float(q.norm()) == pytest.approx(1.0, abs=1e-6)
