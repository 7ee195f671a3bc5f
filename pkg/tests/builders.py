"""Small hand-built extracts for unit tests."""

import datetime as dt

from cirrhosis_horizon.ehr import (
    PANEL_LOINC,
    VITAL_KINDS,
    ClinicalRecordSet,
    DiagnosisEvent,
    Encounter,
    IcdVersion,
    LabResult,
    PatientRecord,
    VitalSign,
)

D = dt.date.fromisoformat

# Plausible values for the full panel, keyed by LOINC / vital kind.
PANEL_VALUES = {
    "1742-6": 40.0, "1751-7": 4.0, "1920-8": 50.0, "6768-6": 100.0, "1975-2": 0.8,
    "718-7": 13.0, "26515-7": 200.0, "2885-2": 7.0, "5902-2": 14.0,
    "SBP": 130.0, "DBP": 80.0, "BMI": 32.0,
}


class Builder:
    def __init__(self):
        self.patients, self.encounters, self.diagnoses, self.labs, self.vitals = [], [], [], [], []
        self._enc = 0

    def patient(self, pid, birth="1960-05-05", **demo):
        self.patients.append(PatientRecord(pid, D(birth), **demo))
        return self

    def visit(self, pid, date, *codes):
        self._enc += 1
        self.encounters.append(Encounter(pid, D(date), f"E{self._enc:05d}"))
        for code in codes:
            self.dx(pid, date, code)
        return self

    def dx(self, pid, date, code):
        version = IcdVersion.ICD10 if code[0].isalpha() else IcdVersion.ICD9
        self.diagnoses.append(DiagnosisEvent(pid, D(date), version, code.replace(".", "").upper()))
        return self

    def panel(self, pid, date, scale=1.0, skip=()):
        for loinc in PANEL_LOINC:
            if loinc not in skip:
                self.labs.append(LabResult(pid, D(date), loinc, PANEL_VALUES[loinc] * scale))
        for kind in VITAL_KINDS:
            if kind not in skip:
                self.vitals.append(VitalSign(pid, D(date), kind, PANEL_VALUES[kind]))
        return self

    def build(self):
        return ClinicalRecordSet(self.patients, self.encounters, self.diagnoses, self.labs, self.vitals)


def small_cohort_records():
    """One case (index 2020-06-15, 1y prediction point 2019-06-15) and six fatty-liver controls.

    C1..C5 have visits within 7 days of the prediction point, C6 is 8 days
    away, and C5 lacks BMI.
    """
    b = Builder()
    b.patient("P1").visit("P1", "2018-01-10", "K76.0").panel("P1", "2018-01-10")
    b.visit("P1", "2020-06-15", "K74.60").panel("P1", "2020-03-01", scale=3.0)
    offsets = {"C1": -7, "C2": -3, "C3": 0, "C4": 4, "C5": 7, "C6": 8}
    for pid, off in offsets.items():
        day = (D("2019-06-15") + dt.timedelta(days=off)).isoformat()
        b.patient(pid).visit(pid, "2017-02-02", "571.8").panel(pid, "2017-02-02", skip=("BMI",) if pid == "C5" else ())
        b.visit(pid, day)
    b.patient("X1").visit("X1", "2019-06-15")  # no fatty liver: never eligible
    return b.build()
