import io as pyio

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from hiresvlm.errors import ConfigurationError, InputError
from hiresvlm.io import (
    WEIGHTS_MAGIC,
    ModelConfig,
    decode_image,
    dumps_weights,
    load_config,
    load_image,
    load_weights,
    parse_config,
    read_weights,
    save_weights,
)


class TestConfig:
    def test_defaults(self):
        assert parse_config("") == ModelConfig()

    def test_values_and_comments(self):
        cfg = parse_config("# toy\nseed = 7\nd_vit=8   # narrow\nout_std = 0\n")
        assert (cfg.seed, cfg.d_vit, cfg.out_std) == (7, 8, 0.0)

    def test_roundtrip(self):
        cfg = ModelConfig(seed=3, interval=2, out_std=0.25)
        assert parse_config(cfg.dumps()) == cfg

    def test_file(self, tmp_path):
        p = tmp_path / "m.cfg"
        p.write_text("layers = 4\ninterval = 2\n")
        cfg = load_config(p)
        assert cfg.decoder_geometry().cross_layer_indices == (0, 2)

    @pytest.mark.parametrize("text", ["bogus = 1", "d = 1.5", "interval = 9", "patch_size = 5", "no equals sign"])
    def test_rejects(self, text):
        with pytest.raises(ConfigurationError):
            parse_config(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            load_config(tmp_path / "nope.cfg")

    def test_build_deterministic(self):
        a, b = ModelConfig(seed=5).build(), ModelConfig(seed=5).build()
        assert a.frozen_checksums() == b.frozen_checksums()


class TestWeights:
    @given(st.dictionaries(st.text(min_size=1, max_size=8),
                           hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
                           max_size=4))
    def test_roundtrip(self, arrays):
        back = read_weights(pyio.BytesIO(dumps_weights(arrays)))
        assert back.keys() == arrays.keys()
        for k in arrays:
            assert back[k].shape == np.shape(arrays[k])
            np.testing.assert_array_equal(back[k], arrays[k])

    def test_model_state(self, tmp_path):
        m = ModelConfig(seed=1, out_std=0.1).build()
        path = tmp_path / "w.bin"
        save_weights(path, m.state_dict())
        other = ModelConfig(seed=2).build()
        other.load_state_dict(load_weights(path))
        assert other.frozen_checksums() == m.frozen_checksums()

    def test_header_layout(self):
        blob = dumps_weights({"w": np.array([[1.0, 2.0]])})
        assert blob[:4] == WEIGHTS_MAGIC
        assert int.from_bytes(blob[4:8], "little") == 1
        assert np.frombuffer(blob[-16:], "<f8").tolist() == [1.0, 2.0]

    @pytest.mark.parametrize("blob", [b"nope", WEIGHTS_MAGIC + b"\x02\x00\x00\x00\x00\x00\x00\x00"])
    def test_bad_header(self, blob):
        with pytest.raises(InputError):
            read_weights(pyio.BytesIO(blob))

    def test_truncated(self):
        blob = dumps_weights({"w": np.ones(3)})
        with pytest.raises(InputError):
            read_weights(pyio.BytesIO(blob[:-1]))
        with pytest.raises(InputError):
            read_weights(pyio.BytesIO(blob + b"x"))


class TestImages:
    @pytest.mark.parametrize("fmt", ["PPM", "PNG"])
    def test_decode(self, fmt, tmp_path):
        pixels = np.random.default_rng(0).integers(0, 256, (9, 7, 3), dtype=np.uint8)
        path = tmp_path / f"x.{fmt.lower()}"
        Image.fromarray(pixels).save(path, format=fmt)
        img = load_image(path)
        assert img.shape == (9, 7, 3) and img.dtype == np.float64
        np.testing.assert_array_equal(img * 255.0, pixels)

    def test_grayscale_promoted(self):
        buf = pyio.BytesIO()
        Image.fromarray(np.full((4, 4), 255, np.uint8)).save(buf, format="PNG")
        assert decode_image(buf.getvalue()).shape == (4, 4, 3)

    def test_garbage(self):
        with pytest.raises(InputError):
            decode_image(b"not an image")
