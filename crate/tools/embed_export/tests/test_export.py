import hashlib
import os
import tempfile
import unittest

import numpy as np

from embed_export import (
    DEFAULT_PROMPTS,
    ExportJob,
    export_image_features,
    export_prompt_embeddings,
    read_container,
    read_prompt_file,
)
from embed_export.formats import container_bytes


class HashEncoder:
    """Deterministic stand-in: embeddings are a function of the file bytes."""

    checkpoint = "hash:test"
    preprocessing = {"resize": 0}

    def _vec(self, data, n):
        seed = int.from_bytes(hashlib.sha256(data).digest()[:8], "little")
        return np.random.default_rng(seed).standard_normal(n).astype(np.float32)

    def encode_images(self, paths, kind):
        out = []
        for p in paths:
            with open(p, "rb") as f:
                data = f.read()
            out.append(self._vec(data, 8) if kind == "global" else self._vec(data, 24).reshape(2, 3, 4))
        return out

    def encode_texts(self, texts):
        return np.stack([self._vec(t.encode(), 8) for t in texts])


def _manifest(d, names, missing=()):
    lines = ["image_id,filepath,grade,patient_id,source"]
    for i, n in enumerate(names):
        if n not in missing:
            with open(os.path.join(d, n + ".png"), "wb") as f:
                f.write(n.encode() * 3)
        lines.append(f"{n},{n}.png,{i % 5},,test")
    path = os.path.join(d, "manifest.csv")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return path


class ExportTests(unittest.TestCase):
    def test_three_images(self):
        with tempfile.TemporaryDirectory() as d:
            m = _manifest(d, ["a", "b", "c"])
            out = os.path.join(d, "e.gfe")
            res = export_image_features(ExportJob(m, "hash:test", out, batch_size=2), HashEncoder())
            self.assertEqual(res.exported, ["a", "b", "c"])
            _, entries = read_container(out)
            self.assertEqual([e for e, _ in entries], ["a", "b", "c"])
            # cosine with itself after the round trip
            v = entries[0][1].astype(np.float64)
            self.assertAlmostEqual(v @ v / (np.linalg.norm(v) ** 2), 1.0, delta=1e-6)

    def test_deterministic_bytes(self):
        with tempfile.TemporaryDirectory() as d:
            m = _manifest(d, ["a", "b"])
            outs = [os.path.join(d, f"{i}.gfe") for i in range(2)]
            for o in outs:
                export_image_features(ExportJob(m, "hash:test", o, kind="feature-map"), HashEncoder())
            a, b = (open(o, "rb") for o in outs)
            with a, b:
                self.assertEqual(a.read(), b.read())
            _, entries = read_container(outs[0])
            self.assertEqual(entries[0][1].shape, (2, 3, 4))

    def test_unreadable_listed_and_job_continues(self):
        with tempfile.TemporaryDirectory() as d:
            m = _manifest(d, ["a", "b", "c"], missing={"b"})
            out = os.path.join(d, "e.gfe")
            res = export_image_features(ExportJob(m, "hash:test", out), HashEncoder())
            self.assertEqual(res.exported, ["a", "c"])
            self.assertEqual([i for i, _ in res.exceptions], ["b"])
            self.assertTrue(os.path.exists(out + ".exceptions.csv"))

    def test_prompts(self):
        with tempfile.TemporaryDirectory() as d:
            out = os.path.join(d, "p.gfp")
            export_prompt_embeddings(DEFAULT_PROMPTS, HashEncoder(), out)
            texts, rows = read_prompt_file(out)
            self.assertEqual(texts, DEFAULT_PROMPTS)
            self.assertEqual(rows.shape, (5, 8))
            export_prompt_embeddings([DEFAULT_PROMPTS[0]] * 5, HashEncoder(), out)
            _, rows = read_prompt_file(out)
            self.assertTrue(all((r == rows[0]).all() for r in rows))
            with self.assertRaises(ValueError):
                export_prompt_embeddings(DEFAULT_PROMPTS[:4], HashEncoder(), out)

    def test_checkpoint_required(self):
        with self.assertRaises(ValueError):
            ExportJob("m.csv", "", "o.gfe")

    def test_duplicate_ids_rejected(self):
        with self.assertRaises(ValueError):
            container_bytes([("a", np.ones(2)), ("a", np.ones(2))], "{}")


if __name__ == "__main__":
    unittest.main()
