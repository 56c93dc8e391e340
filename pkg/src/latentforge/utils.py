import os, random, hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import polars as pl
import torch
from PIL import Image, UnidentifiedImageError

from latentforge.models import DTYPE, ImageGrid, MalformedImageError, ScoreTrace

_U64 = (1 << 64) - 1

TRACE_COLUMNS = ["iter", "s", "l", "lambda", "gnorm_s", "gnorm_l"]


def seed_everything(seed):
    random.seed(seed)
    os.environ['PYTHONHASHSEED']=str(seed)
    np.random.seed(seed & 0xFFFFFFFF)
    torch.manual_seed(seed & _U64)


def derive_stream_id(parent: int, child: Union[int, str]) -> int:
    """ Stable 64 bit id for the sub-stream `child` of the stream `parent` """
    digest = hashlib.blake2b(f"{parent & _U64}/{child}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


@dataclass(frozen=True)
class RngStream:
    """
    Counter-based random stream. The values drawn are a pure function of
    (seed, stream_id, counter), so a stream can be recreated anywhere and
    evaluated in any order.

    :param int seed: 64 bit global seed
    :param int stream_id: 64 bit stream id
    """
    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        """ A fresh generator positioned at counter 0 of this stream """
        key = np.array([self.seed & _U64, self.stream_id & _U64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def fork(self, child: Union[int, str]):
        return RngStream(self.seed, derive_stream_id(self.stream_id, child))

    def normal(self, *shape: int) -> torch.Tensor:
        return torch.from_numpy(self.generator().standard_normal(shape)).to(DTYPE)

    def uniform(self, *shape: int, low=0.0, high=1.0) -> torch.Tensor:
        return torch.from_numpy(self.generator().uniform(low, high, shape)).to(DTYPE)


def quantize(image: ImageGrid) -> np.ndarray:
    """ Round-half-up quantization of [0, 1] intensities to bytes """
    array = image.detach().cpu().to(DTYPE).numpy()
    return np.floor(np.clip(array, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(image: ImageGrid, path: Union[str, Path]):
    """
    Writes a binary PPM (P6, maxval 255).

    :param Tensor[H, W, 3] image: Intensities, clamped to [0, 1] on write
    """
    if image.dim() != 3 or image.shape[-1] != 3:
        raise ValueError(f"Expected an image of shape [H, W, 3], got {tuple(image.shape)}")
    Image.fromarray(quantize(image)).save(path, format="PPM")


def read_ppm(path: Union[str, Path]) -> ImageGrid:
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic != b"P6":
        raise MalformedImageError(f"{path} is not a binary PPM file (magic {magic!r})")
    try:
        with Image.open(path, formats=["PPM"]) as img:
            if img.mode != "RGB":
                raise MalformedImageError(f"{path} has unsupported PPM mode {img.mode}")
            array = np.asarray(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise MalformedImageError(f"Could not read {path}: {e}") from e
    return torch.from_numpy(array.astype(np.float64) / 255.0)


def format_float(value: float) -> str:
    """ Plain decimal notation with 12 significant digits """
    return np.format_float_positional(
        float(value), precision=12, unique=False, fractional=False, trim="-")


def _format_cell(value) -> str:
    if isinstance(value, (bool, np.bool_)): return str(value).lower()
    if isinstance(value, (int, np.integer)): return str(int(value))
    if isinstance(value, (float, np.floating)): return format_float(value)
    return str(value)


def write_rows_csv(path: Union[str, Path], columns: Dict[str, Sequence]):
    """
    Writes named columns of equal length to a UTF-8 CSV file. Floats are
    written in decimal notation so that reruns are byte-identical.
    """
    lengths = {len(col) for col in columns.values()}
    assert len(lengths) <= 1, "All CSV columns need the same length"
    df = pl.DataFrame(
        {name: [_format_cell(v) for v in col] for name, col in columns.items()},
        schema={name: pl.String for name in columns}
    )
    df.write_csv(path)


def write_trace_csv(trace: ScoreTrace, path: Union[str, Path]):
    """ Writes the trace with header `iter,s,l,lambda,gnorm_s,gnorm_l` """
    rows = trace.rows
    write_rows_csv(path, {
        "iter": [r.iteration for r in rows],
        "s": [r.score for r in rows],
        "l": [r.loss for r in rows],
        "lambda": [r.lam for r in rows],
        "gnorm_s": [r.gnorm_s for r in rows],
        "gnorm_l": [r.gnorm_l for r in rows],
    })


def read_csv_rows(path: Union[str, Path]) -> List[Dict[str, str]]:
    return pl.read_csv(path, infer_schema_length=0).to_dicts()


def grid_image(array: torch.Tensor, line_color: Tuple[float, float, float] = (1., 0., 0.),
               line_width=1) -> ImageGrid:
    """
    Lays out a grid of rgb images seperated by colored lines

    :param Tensor[n_rows, n_cols, H, W, 3] array: Structured array of images
    :return Tensor[H', W', 3]: One image holding the whole grid
    """
    assert len(array.shape) == 5, "Only works for arrays of shape [n_rows, n_cols, H, W, 3]"
    n_rows, n_cols, y, x, n_channels = array.shape
    array = array.detach().to(DTYPE).clamp(0, 1)

    # Create a new RGB array to hold the grid with separating lines
    grid_size = (y * n_rows + line_width * (n_rows - 1), x * n_cols + line_width * (n_cols - 1), n_channels)
    grid = torch.zeros(grid_size, dtype=DTYPE)

    # Create colored lines
    color = torch.tensor(line_color, dtype=DTYPE)
    for i in range(1, n_rows):
        grid[i*(y+line_width)-line_width:i*(y+line_width), :] = color
    for j in range(1, n_cols):
        grid[:, j*(x+line_width)-line_width:j*(x+line_width)] = color

    # Place each image in the grid
    for i in range(n_rows):
        for j in range(n_cols):
            y_start = i * (y + line_width)
            x_start = j * (x + line_width)
            grid[y_start:y_start+y, x_start:x_start+x] = array[i, j]

    return grid
