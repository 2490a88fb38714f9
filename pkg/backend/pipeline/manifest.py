"""
Cohort manifest: one CSV row per subject naming its frames in acquisition order.

    subject_id,group,ed_index,es_index,frames
    s001,Control,0,3,meshes/s001/frame_00.vtk;meshes/s001/frame_01.vtk;...

Frame paths are relative to the manifest's directory.
"""
import csv
from dataclasses import dataclass
import logging
from pathlib import Path

from geometry.exceptions import InvalidInputError
from meshes.io import read_mesh
from meshes.mesh import SubjectSequence

from .serializers import ManifestRowSerializer

logger = logging.getLogger(__name__)

MANIFEST_FIELDS = ["subject_id", "group", "ed_index", "es_index", "frames"]


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    group: str
    ed_index: int
    es_index: int
    frames: tuple

    def load(self):
        """Read every frame and check they share one topology."""
        meshes = [read_mesh(path) for path in self.frames]
        return SubjectSequence(self.subject_id, self.group, meshes, self.ed_index, self.es_index)


def read_manifest(path):
    path = Path(path)
    if not path.exists():
        raise InvalidInputError("manifest not found", context={"path": str(path)})
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise InvalidInputError("no subjects", code="empty_manifest", context={"path": str(path)})
        if reader.fieldnames != MANIFEST_FIELDS:
            raise InvalidInputError(
                "unexpected manifest header", context={"path": str(path), "expected": ",".join(MANIFEST_FIELDS)}
            )
        rows = list(enumerate(reader, start=2))

    entries = []
    seen = set()
    for line, row in rows:
        serializer = ManifestRowSerializer(data=row)
        if not serializer.is_valid():
            raise InvalidInputError(
                "invalid manifest row", code="invalid_manifest",
                context={"path": str(path), "line": line, "errors": dict(serializer.errors)},
            )
        data = serializer.validated_data
        if data["subject_id"] in seen:
            raise InvalidInputError("duplicate subject id", code="invalid_manifest",
                                    context={"path": str(path), "line": line, "subject": data["subject_id"]})
        seen.add(data["subject_id"])
        frames = tuple(path.parent / frame for frame in data["frames"])
        missing = [str(frame) for frame in frames if not frame.exists()]
        if missing:
            raise InvalidInputError("manifest references missing frame files", code="invalid_manifest",
                                    context={"line": line, "subject": data["subject_id"], "missing": missing[:3]})
        entries.append(ManifestEntry(data["subject_id"], data["group"], data["ed_index"], data["es_index"], frames))
    if not entries:
        raise InvalidInputError("no subjects", code="empty_manifest", context={"path": str(path)})
    logger.info("manifest %s: %d subjects", path, len(entries))
    return entries


def write_manifest(path, entries):
    """Write ``entries``; frame paths are stored relative to the manifest directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for entry in entries:
            frames = ";".join(Path(frame).relative_to(path.parent).as_posix() for frame in entry.frames)
            writer.writerow([entry.subject_id, entry.group, entry.ed_index, entry.es_index, frames])
    return path
