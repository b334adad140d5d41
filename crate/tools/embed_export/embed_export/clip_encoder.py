"""open_clip-backed encoder. Needs the `clip` extra."""

import numpy as np


class OpenClipEncoder:
    def __init__(self, checkpoint, device="cpu"):
        import open_clip
        import torch

        # "<arch>:<pretrained tag>", e.g. "RN50:openai"; never defaulted
        arch, _, tag = checkpoint.partition(":")
        if not tag:
            raise ValueError("checkpoint must be '<arch>:<pretrained>'")
        self._torch = torch
        self.checkpoint = checkpoint
        self.model, _, self.transform = open_clip.create_model_and_transforms(arch, pretrained=tag)
        self.model.eval().to(device)
        self.tokenizer = open_clip.get_tokenizer(arch)
        self.device = device
        self.preprocessing = {"transform": repr(self.transform)}

    def _batch(self, paths):
        from PIL import Image

        return self._torch.stack([self.transform(Image.open(p).convert("RGB")) for p in paths]).to(self.device)

    def encode_images(self, paths, kind):
        torch = self._torch
        with torch.no_grad():
            x = self._batch(paths)
            if kind == "global":
                return list(self.model.encode_image(x).float().cpu().numpy())
            visual = self.model.visual
            if not hasattr(visual, "layer4"):
                raise ValueError("feature-map export needs a ResNet visual tower")
            # the attention pool is skipped: the layer4 output is the feature map
            x = visual.stem(x.to(visual.conv1.weight.dtype))
            for layer in (visual.layer1, visual.layer2, visual.layer3, visual.layer4):
                x = layer(x)
            return list(x.float().cpu().numpy())

    def encode_texts(self, texts):
        torch = self._torch
        with torch.no_grad():
            tokens = self.tokenizer(list(texts)).to(self.device)
            return self.model.encode_text(tokens).float().cpu().numpy().astype(np.float32)
