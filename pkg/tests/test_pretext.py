import torch

from dcss.lora import module_checksum
from dcss.pretext import PretextConfig, pretrain_grounder
from dcss.synth_data import DatasetSpec, generate_dataset


def test_pretext_is_seeded_and_freezes():
    data = generate_dataset(DatasetSpec(num_classes=4, samples_per_class=4, seed=2))
    cfg = PretextConfig(steps=6, batch_size=8)
    a = pretrain_grounder(data, config=cfg)
    b = pretrain_grounder(data, config=cfg)
    assert module_checksum(a) == module_checksum(b)
    assert all(not p.requires_grad for p in a.parameters())
    c = pretrain_grounder(data, config=PretextConfig(steps=6, batch_size=8, seed=6))
    assert module_checksum(c) != module_checksum(a)
    vt = a.encoder(torch.from_numpy(data[0].image[None]))
    assert torch.isfinite(vt.tokens).all()
