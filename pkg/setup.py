"""Setup configuration for the Nested Factorization demand engine."""

from setuptools import setup, find_packages
from pathlib import Path

# Read the README file
readme_file = Path(__file__).parent / "README.md"
if readme_file.exists():
    long_description = readme_file.read_text(encoding="utf-8")
else:
    long_description = "Nested Factorization demand engine"

# Read requirements
requirements_file = Path(__file__).parent / "requirements.txt"
if requirements_file.exists():
    requirements = requirements_file.read_text().splitlines()
    # Filter out comments, empty lines and development tools
    requirements = [
        req.strip() for req in requirements
        if req.strip() and not req.strip().startswith('#')
        and not req.strip().startswith(("black", "flake8", "mypy"))
    ]
else:
    requirements = []

setup(
    name="nested-factorization-demand",
    version="0.1.0",
    description="Nested Factorization demand estimation with logit baselines and counterfactual evaluation",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests", "scripts"]),
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Information Analysis",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
    ],
    python_requires=">=3.10",
    install_requires=requirements,
    extras_require={
        "dev": [
            "black>=23.11.0",
            "flake8>=6.1.0",
            "mypy>=1.7.1",
        ],
    },
    entry_points={
        "console_scripts": [
            "nfdemand=src.cli:main",
        ],
    },
    include_package_data=True,
    package_data={
        "": ["*.json"],
    },
)
