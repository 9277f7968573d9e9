"""Generate test fixtures for the studio frontend.

Writes, under tests/fixtures/:
  compose_cases.json  -- 10 scripted placements with the server-side
                         composite as the golden image (raw base64 bytes)
  sketch_frames.json  -- base64 PNG sketch frames sized for the micro model
  micro.ckpt          -- a briefly trained micro checkpoint for the
                         integration test server
  micro_meta.json     -- its geometry
"""

import base64
import io
import json
import sys
import tempfile
from pathlib import Path

import numpy as np

from PIL import Image

from sketchanim.canvas import CanvasSpec, InstanceImage, InstanceSet, Placement, compose
from sketchanim.data_factory import write_corpus, read_manifest, load_sample

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def b64_bytes(arr: np.ndarray) -> str:
    return base64.b64encode(arr.astype(np.uint8).tobytes()).decode("ascii")


def b64_png(arr: np.ndarray, mode: str = "RGB") -> str:
    buf = io.BytesIO()
    Image.fromarray(arr.astype(np.uint8), mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def make_compose_cases():
    rng = np.random.default_rng(99)
    cases = []
    for case_idx in range(10):
        width = height = 16
        n_inst = int(rng.integers(1, 4))
        instances = {}
        for i in range(n_inst):
            h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
            img = (rng.integers(0, 256, size=(h, w, 3))).astype(np.uint8)
            mask = rng.random((h, w)) > 0.25
            instances[f"sprite{i}"] = {
                "width": w,
                "height": h,
                "rgb": b64_bytes(img),
                "mask": b64_bytes(mask.astype(np.uint8)),
                "png": b64_png(img),
                "mask_png": b64_png(mask.astype(np.uint8) * 255, mode="L"),
            }
        placements = [
            {
                "instance_id": f"sprite{int(rng.integers(n_inst))}",
                "x": int(rng.integers(-3, 14)),
                "y": int(rng.integers(-3, 14)),
                "scale": float(rng.choice([0.5, 1.0, 1.5, 2.0])),
                "z_order": int(rng.integers(0, 4)),
            }
            for _ in range(int(rng.integers(1, 5)))
        ]
        inst_set = InstanceSet()
        for inst_id, data in instances.items():
            img = np.frombuffer(base64.b64decode(data["rgb"]), dtype=np.uint8).reshape(
                data["height"], data["width"], 3
            )
            mask = np.frombuffer(base64.b64decode(data["mask"]), dtype=np.uint8).reshape(
                data["height"], data["width"]
            ).astype(bool)
            inst_set.add(inst_id, InstanceImage(image=img / 255.0, mask=mask))
        spec = CanvasSpec(
            width=width,
            height=height,
            placements=[
                Placement(p["instance_id"], p["x"], p["y"], p["scale"], p["z_order"])
                for p in placements
            ],
        )
        golden = np.round(compose(spec, inst_set) * 255.0).astype(np.uint8)
        cases.append(
            {
                "name": f"case{case_idx}",
                "width": width,
                "height": height,
                "instances": instances,
                "placements": placements,
                "expected_rgb": b64_bytes(golden),
            }
        )
    (FIXTURES / "compose_cases.json").write_text(json.dumps(cases, indent=1))
    print(f"wrote {len(cases)} compose cases")


def make_micro_checkpoint():
    from sketchanim.training import TrainConfig, model_config_for_corpus, train

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        write_corpus(tmp / "c", size=4, seed=77, width=16, height=16, frames=2,
                     min_sprites=1, max_sprites=2)
        manifest = read_manifest(tmp / "c")
        mc = model_config_for_corpus(
            manifest, hidden_dim=16, blocks=2, heads=2, instance_px=4,
            semantic_dim=8, semantic_tokens=2, text_buckets=512,
            schedule_steps=50, max_instances=4,
        )
        config = TrainConfig(learning_rate=1e-3, steps=30, seed=5, checkpoint_every=0)
        final = train(config, tmp / "c", tmp / "run", mc)
        (FIXTURES / "micro.ckpt").write_bytes(Path(final).read_bytes())
        record = load_sample(tmp / "c" / "sample_000000")
        from PIL import Image

        frames = []
        for frame in record.sketches.frames:
            arr = np.round(frame * 255).astype(np.uint8)
            buf = io.BytesIO()
            Image.fromarray(arr).save(buf, format="PNG")
            frames.append(base64.b64encode(buf.getvalue()).decode("ascii"))
        (FIXTURES / "sketch_frames.json").write_text(json.dumps(frames))
        (FIXTURES / "micro_meta.json").write_text(
            json.dumps({"width": 16, "height": 16, "frames": 2})
        )
    print("wrote micro checkpoint and sketch frames")


if __name__ == "__main__":
    FIXTURES.mkdir(parents=True, exist_ok=True)
    make_compose_cases()
    make_micro_checkpoint()
    print("fixtures ready at", FIXTURES)
    sys.exit(0)
