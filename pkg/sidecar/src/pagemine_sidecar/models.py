"""Detector and segmenter adapters.

Two families: deterministic in-memory stubs for tests and demos, and thin
wrappers around transformers checkpoints (a zero-shot grounded detector and
a promptable mask model). The heavy imports happen inside ``load`` so the
stubs work without torch installed.
"""

from dataclasses import dataclass
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class NativeDetection:
    """One raw detector hit in the model's native box format:
    (cx, cy, w, h), each normalized to [0, 1]."""

    box: tuple[float, float, float, float]
    score: float
    phrase: str


class Detector(Protocol):
    identifier: str

    def load(self) -> None: ...

    def detect(
        self, image: Image.Image, caption: str, box_threshold: float, text_threshold: float
    ) -> list[NativeDetection]: ...


class Segmenter(Protocol):
    identifier: str

    def load(self) -> None: ...

    def segment(self, image: Image.Image, boxes: Sequence[Sequence[float]]) -> list[np.ndarray]: ...


class StubDetector:
    """Returns scripted hits per caption, honoring box_threshold natively."""

    identifier = "stub-detector"

    def __init__(self, script: Optional[dict[str, Iterable[NativeDetection]]] = None):
        self.script = {k: list(v) for k, v in (script or {}).items()}
        self.calls: list[dict] = []

    def load(self) -> None:
        pass

    def detect(
        self, image: Image.Image, caption: str, box_threshold: float, text_threshold: float
    ) -> list[NativeDetection]:
        self.calls.append(
            {
                "caption": caption,
                "box_threshold": box_threshold,
                "text_threshold": text_threshold,
                "size": image.size,
            }
        )
        return [d for d in self.script.get(caption, []) if d.score >= box_threshold]


class StubSegmenter:
    """Fills each box's integer-rounded interior."""

    identifier = "stub-segmenter"

    def __init__(self):
        self.calls: list[list[tuple[float, ...]]] = []

    def load(self) -> None:
        pass

    def segment(self, image: Image.Image, boxes: Sequence[Sequence[float]]) -> list[np.ndarray]:
        self.calls.append([tuple(float(v) for v in b) for b in boxes])
        width, height = image.size
        out = []
        for x0, y0, x1, y1 in boxes:
            grid = np.zeros((height, width), dtype=bool)
            c0 = max(int(round(x0)), 0)
            r0 = max(int(round(y0)), 0)
            c1 = min(int(round(x1)), width)
            r1 = min(int(round(y1)), height)
            grid[r0:r1, c0:c1] = True
            out.append(grid)
        return out


class TransformersDetector:
    """Zero-shot grounded detection from a transformers checkpoint.

    Works with checkpoints exposing AutoModelForZeroShotObjectDetection
    (e.g. IDEA-Research/grounding-dino-tiny). Emits native normalized
    center-format boxes; the HTTP layer converts to corner pixels.
    """

    def __init__(self, checkpoint: str, device: str = "cpu"):
        self.identifier = checkpoint
        self._device = device
        self._model = None
        self._processor = None

    def load(self) -> None:
        import torch  # noqa: F401  (fail here, not mid-request)
        from transformers import AutoModelForZeroShotObjectDetection, AutoProcessor

        self._processor = AutoProcessor.from_pretrained(self.identifier)
        self._model = (
            AutoModelForZeroShotObjectDetection.from_pretrained(self.identifier)
            .to(self._device)
            .eval()
        )

    def detect(
        self, image: Image.Image, caption: str, box_threshold: float, text_threshold: float
    ) -> list[NativeDetection]:
        import torch

        inputs = self._processor(images=image, text=caption, return_tensors="pt").to(self._device)
        with torch.no_grad():
            outputs = self._model(**inputs)
        logits = outputs.logits.sigmoid()[0]  # (queries, text tokens)
        boxes = outputs.pred_boxes[0]  # (queries, 4) native cx cy w h
        scores, _ = logits.max(dim=1)
        token_ids = inputs["input_ids"][0]
        hits = []
        for q in (scores >= box_threshold).nonzero().flatten().tolist():
            token_mask = logits[q] > text_threshold
            phrase = self._processor.tokenizer.decode(
                token_ids[token_mask], skip_special_tokens=True
            )
            hits.append(
                NativeDetection(
                    box=tuple(float(v) for v in boxes[q].tolist()),
                    score=float(scores[q]),
                    phrase=phrase.strip(),
                )
            )
        return hits


class TransformersSegmenter:
    """Box-prompted mask prediction from a transformers checkpoint
    (e.g. facebook/sam-vit-base). Returns one mask per box, picking the
    proposal the model itself scores highest."""

    def __init__(self, checkpoint: str, device: str = "cpu"):
        self.identifier = checkpoint
        self._device = device
        self._model = None
        self._processor = None

    def load(self) -> None:
        import torch  # noqa: F401
        from transformers import SamModel, SamProcessor

        self._processor = SamProcessor.from_pretrained(self.identifier)
        self._model = SamModel.from_pretrained(self.identifier).to(self._device).eval()

    def segment(self, image: Image.Image, boxes: Sequence[Sequence[float]]) -> list[np.ndarray]:
        import torch

        input_boxes = [[[float(v) for v in b] for b in boxes]]
        inputs = self._processor(image, input_boxes=input_boxes, return_tensors="pt").to(
            self._device
        )
        with torch.no_grad():
            outputs = self._model(**inputs)
        masks = self._processor.image_processor.post_process_masks(
            outputs.pred_masks.cpu(),
            inputs["original_sizes"].cpu(),
            inputs["reshaped_input_sizes"].cpu(),
        )[0]  # (n_boxes, n_proposals, H, W)
        picks = outputs.iou_scores.cpu()[0].argmax(dim=1)
        return [
            masks[i, int(picks[i])].numpy().astype(bool) for i in range(masks.shape[0])
        ]
