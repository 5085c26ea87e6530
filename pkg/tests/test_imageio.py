import numpy as np
import pytest

from cascadeface.geometry import Box
from cascadeface.imageio import (AnnotationFormatError, ImageFormatError, annotation_record,
                                 decode_ppm, encode_ppm, load_annotations, load_image,
                                 save_annotations, save_image)


def test_known_two_by_one_file():
    data = b"P6\n2 1\n255\n" + bytes([255, 0, 0, 1, 2, 3])
    img = decode_ppm(data)
    assert img.shape == (1, 2, 3)
    assert img[0, 0].tolist() == [255, 0, 0]
    assert img[0, 1].tolist() == [1, 2, 3]
    assert encode_ppm(img) == data


def test_header_comments_and_whitespace():
    data = b"P6 # made by hand\n# another\n2\t1 255\n" + bytes(6)
    assert decode_ppm(data).shape == (1, 2, 3)


def test_roundtrip_random_image(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(17, 23, 3), dtype=np.uint8)
    path = tmp_path / "x.ppm"
    save_image(path, img)
    back = load_image(path)
    assert back.dtype == np.uint8 and back.tobytes() == img.tobytes()
    save_image(tmp_path / "y.ppm", back)
    assert path.read_bytes() == (tmp_path / "y.ppm").read_bytes()


@pytest.mark.parametrize("blob,msg", [
    (b"P3\n1 1\n255\n" + bytes(3), "only P6"),
    (b"P6\n1 1\n65535\n" + bytes(6), "maxval"),
    (b"P6\n2 2\n255\n" + bytes(5), "truncated"),
    (b"P6\n2", "truncated PPM header"),
    (b"P6\nx 1\n255\n" + bytes(3), "bad PPM header"),
    (b"P6\n0 1\n255\n", "bad PPM size"),
])
def test_malformed_images(blob, msg):
    with pytest.raises(ImageFormatError, match=msg):
        decode_ppm(blob)


def test_encode_rejects_wrong_layout():
    with pytest.raises(ImageFormatError):
        encode_ppm(np.zeros((3, 4, 4), np.uint8))
    with pytest.raises(ImageFormatError):
        encode_ppm(np.zeros((4, 4, 3), np.float32))


def test_annotation_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    boxes = [Box(0.1, 2.25, 30.123456789012345, 40.5), Box(5, 5, 6, 6)]
    lms = [rng.uniform(0, 100, size=(5, 2)), None]
    path = tmp_path / "a.jsonl"
    save_annotations(path, [annotation_record("a.ppm", boxes, lms),
                            annotation_record("b.ppm", [], [])])
    recs = load_annotations(path)
    assert [r["image"] for r in recs] == ["a.ppm", "b.ppm"]
    assert recs[0]["boxes"] == boxes
    assert recs[0]["landmarks"][0].tobytes() == lms[0].tobytes()
    assert recs[0]["landmarks"][1] is None
    assert recs[1]["boxes"] == [] and recs[1]["landmarks"] == []


@pytest.mark.parametrize("line", [
    "{not json",
    '{"image": "a", "boxes": [[0, 0, 1]]}',
    '{"image": "a", "boxes": [[0, 0, 1, 1]], "landmarks": []}',
    '{"boxes": []}',
    '{"image": "a", "boxes": [[5, 5, 1, 1]]}',
])
def test_malformed_annotations_report_line(tmp_path, line):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"image": "ok", "boxes": []}\n\n' + line + "\n")
    with pytest.raises(AnnotationFormatError, match=r"bad\.jsonl:3:"):
        load_annotations(path)
