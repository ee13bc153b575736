"""Semi-supervised segmentation of forward-looking sonar images with rotating EMA teachers."""

__version__ = "0.1.0"

TEACHER_TAGS = ("general", "sonar_a", "sonar_b")
