"""PLY reader/writer for xyz geometry, built on plyfile."""
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

import numpy as np
import torch
from plyfile import PlyData, PlyElement, PlyElementParseError, PlyHeaderParseError

from app.core.exceptions import PlyFormatError
from app.services.geometry import PointCloud

AXES = ("x", "y", "z")
LABEL_COMMENT = "label"


def _error(message: str, path: Union[str, Path], **details: Any) -> PlyFormatError:
    info: Dict[str, Any] = {"path": str(path)}
    info.update({k: v for k, v in details.items() if v is not None})
    return PlyFormatError(f"{path}: {message}", details=info)


def _label(comments: Sequence[str], path: Union[str, Path]) -> Optional[int]:
    label = None
    for comment in comments:
        tokens = comment.split()
        if len(tokens) == 2 and tokens[0] == LABEL_COMMENT:
            try:
                label = int(tokens[1])
            except ValueError:
                raise _error(f"bad label comment '{comment}'", path)
    return label


def load_pointcloud(path: Union[str, Path]) -> PointCloud:
    """Vertex x/y/z of an ASCII or binary PLY; other properties and elements are ignored."""
    try:
        data = PlyData.read(str(path))
    except PlyHeaderParseError as exc:
        raise _error(f"malformed header: {exc}", path, line=getattr(exc, "line", None))
    except PlyElementParseError as exc:
        raise _error(
            f"malformed body: {exc}",
            path,
            element=getattr(getattr(exc, "element", None), "name", None),
            row=getattr(exc, "row", None),
        )
    except OSError as exc:
        raise _error(f"cannot read file: {exc}", path)
    except ValueError as exc:
        raise _error(f"unreadable PLY: {exc}", path)

    if "vertex" not in [element.name for element in data.elements]:
        raise _error("no vertex element", path)
    vertex = data["vertex"]
    names = [prop.name for prop in vertex.properties]
    for axis in AXES:
        if axis not in names:
            raise _error(f"vertex element lacks property '{axis}'", path, property=axis)
    if vertex.count < 1:
        raise _error("vertex element is empty", path)

    points = np.stack([np.asarray(vertex[axis], dtype=np.float64) for axis in AXES], axis=1)
    bad = ~np.isfinite(points).all(axis=1)
    if bad.any():
        raise _error("non-finite vertex coordinate", path, row=int(np.argmax(bad)))

    label = _label(data.comments, path)
    return PointCloud(torch.from_numpy(points.astype(np.float32)), label=label)


def save_pointcloud(pc: PointCloud, path: Union[str, Path]) -> None:
    """ASCII PLY with float32 x/y/z and an optional ``comment label <n>``."""
    points = pc.points.detach().cpu().to(torch.float32).numpy()
    vertices = np.empty(points.shape[0], dtype=[(axis, "f4") for axis in AXES])
    for i, axis in enumerate(AXES):
        vertices[axis] = points[:, i]

    comments = [] if pc.label is None else [f"{LABEL_COMMENT} {pc.label}"]
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    PlyData([PlyElement.describe(vertices, "vertex")], text=True, comments=comments).write(
        str(target)
    )
