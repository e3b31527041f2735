from __future__ import annotations

import os
import re
from dataclasses import dataclass
from typing import Optional

TAG_PATTERN = re.compile(r'-([^-]+)(?:-(\d+))?$')


@dataclass(frozen=True)
class Tag:
    """
    Names one component of a checkpoint: `Tag('trunk')` turns `tril.bin`
    into `tril-trunk.bin`, `Tag('dsfn', 2)` turns `net.bin` into
    `net-dsfn-2.bin`. A version can also be given inline as `'name:version'`.
    """
    name: str
    version: Optional[int] = None

    def __post_init__(self):
        # Dashes separate the tag from the filename.
        name = self.name.replace('-', '_')
        version = self.version
        if version is None and ':' in name:
            name, version = name.split(':')
            version = int(version)
        object.__setattr__(self, 'name', name)
        object.__setattr__(self, 'version', version)

    @classmethod
    def from_filename(cls, filename: str) -> Tag:
        basename, _ = os.path.splitext(os.path.basename(filename))
        matches = TAG_PATTERN.search(basename)
        if not matches:
            raise ValueError(f'Could not deduce tag from file {filename}')
        name, version = matches.groups()
        return cls(name, int(version) if version else None)

    @classmethod
    def get_version_from_filename(cls, filename: str) -> Optional[int]:
        return cls.from_filename(filename).version

    @classmethod
    def latest_version(cls, directory: str, name: str) -> Optional[int]:
        """
        Returns the highest version saved under `name` in `directory`, or None
        if nothing has been saved under that name yet.
        """
        if not os.path.isdir(directory):
            return None
        versions = [cls.get_version_from_filename(f)
                    for f in os.listdir(directory)
                    if re.search(rf'-{re.escape(name)}-\d+\.\w+$', f)]
        return max(versions, default=None)

    def append_to_filename(self, filename: str) -> str:
        basename, ext = os.path.splitext(filename)
        suffix = self.name if self.version is None \
            else f'{self.name}-{self.version}'
        return f'{basename}-{suffix}{ext}'

    def __str__(self):
        if self.version is None:
            return self.name
        return f'{self.name}:{self.version}'
