# image_read.py - Functions to read and write 8-bit RGB images
#  python3 src/readers/image_read.py <image>

import os
import sys

import numpy as np
from PIL import Image, UnidentifiedImageError

# Add parent directory to path to import from src/
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))
from tensor import ShapeError
from utils import logger

FORMATS = {".png": "PNG", ".ppm": "PPM"}
MODES = ("RGB", "RGBA", "L", "P")


class ImageFormatError(ValueError):
    pass


class ImageTruncatedError(ImageFormatError):
    pass


def _format_for(path):
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in FORMATS:
        raise ImageFormatError(f"unsupported image format {ext or '(none)'} for {path}; use .png or .ppm")
    return FORMATS[ext]


def load_image(path): #LOAD IMAGE -> (3, h, w) float32 in [0, 1]
    _format_for(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"Image not found: {path}")
    try:
        with Image.open(path) as img:
            if img.format not in FORMATS.values():
                raise ImageFormatError(f"{path} holds {img.format} data, expected PNG or PPM")
            if img.mode not in MODES:
                raise ImageFormatError(f"{path}: only 8-bit images are supported, got mode {img.mode}")
            img.load()
            rgb = np.asarray(img.convert("RGB"), dtype=np.float32)
    except UnidentifiedImageError:
        raise ImageFormatError(f"{path} is not a readable PNG or PPM image") from None
    except (OSError, SyntaxError) as error:
        raise ImageTruncatedError(f"{path} is truncated or corrupt: {error}") from None

    logger.debug(f"Loaded image {path} ({rgb.shape[1]}x{rgb.shape[0]})")
    return np.ascontiguousarray(rgb.transpose(2, 0, 1)) / 255


def save_image(image, path): #SAVE IMAGE, clamped and rounded to 8 bits
    fmt = _format_for(path)
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"save_image expects a (3, h, w) array, got {image.shape}")
    data = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    directory = os.path.dirname(str(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(data)).save(path, format=fmt)
    return path


if __name__=="__main__": # pragma: no cover
    image = load_image(sys.argv[1])
    print("\n" + "="*50)
    print(f"SHAPE: {image.shape}  MIN: {image.min():.4f}  MAX: {image.max():.4f}")
    print("="*50)
