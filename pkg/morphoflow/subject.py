"""
Longitudinal subjects and their disease labels
"""
from dataclasses import dataclass, field
from enum import IntEnum
from typing import List, Optional, Union

from morphoflow.volume import ScalarVolume, InvalidInputError


class DiseaseLabel(IntEnum):
    CN = 0
    MCI = 1
    AD = 2

    @classmethod
    def parse(cls, value: Union[int, str, 'DiseaseLabel']) -> 'DiseaseLabel':
        """Accepts a label, its integer code or its (case-insensitive) name"""
        if isinstance(value, str) and not value.strip().isdigit():
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise InvalidInputError(f'Unknown disease label {value!r}, expected one of '
                                        f'{", ".join(m.name for m in cls)}') from None
        try:
            return cls(int(value))
        except ValueError:
            raise InvalidInputError(f'Unknown disease label {value!r}') from None


@dataclass(frozen=True)
class SubjectRecord:
    """One subject: the baseline at ages[0] and its follow-ups at ages[1:]"""

    subject_id: str
    baseline: ScalarVolume
    followups: List[ScalarVolume]
    ages: List[float]
    label: DiseaseLabel
    segmentation: Optional[ScalarVolume] = None
    """Label map aligned with the baseline"""
    synthetic_flags: List[bool] = field(default_factory=list)
    """One flag per age, True for generated frames. Empty means all frames are real"""

    def __post_init__(self):
        object.__setattr__(self, 'label', DiseaseLabel.parse(self.label))
        object.__setattr__(self, 'ages', [float(a) for a in self.ages])
        if len(self.followups) != len(self.ages) - 1:
            raise InvalidInputError(f'Subject {self.subject_id}: {len(self.followups)} follow-ups need '
                                    f'{len(self.followups) + 1} ages, got {len(self.ages)}')
        if any(b <= a for a, b in zip(self.ages, self.ages[1:])):
            raise InvalidInputError(f'Subject {self.subject_id}: ages must be strictly increasing, got {self.ages}')
        for vol in self.followups:
            if vol.shape != self.baseline.shape:
                raise InvalidInputError(f'Subject {self.subject_id}: follow-up shape {vol.shape} differs from '
                                        f'baseline shape {self.baseline.shape}')
        if self.segmentation is not None and self.segmentation.shape != self.baseline.shape:
            raise InvalidInputError(f'Subject {self.subject_id}: segmentation is not aligned with the baseline')
        if not self.synthetic_flags:
            object.__setattr__(self, 'synthetic_flags', [False] * len(self.ages))
        elif len(self.synthetic_flags) != len(self.ages):
            raise InvalidInputError(f'Subject {self.subject_id}: need one provenance flag per age')

    @property
    def baseline_age(self) -> float:
        return self.ages[0]

    @property
    def followup_ages(self) -> List[float]:
        return self.ages[1:]

    @property
    def frames(self) -> int:
        return len(self.followups)
