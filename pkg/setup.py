from setuptools import find_packages, setup

setup(
    name="multigrid_dl",
    version="0.1.0",
    packages=find_packages(),
    install_requires=[
        "numpy",
        "scipy",
        "pandas",
        "scikit-learn",
        "pyyaml",
        "tqdm",
    ],
    extras_require={"test": ["pytest", "torch"], "workflow": ["snakemake"]},
    entry_points={"console_scripts": ["mgdl=multigrid_dl.cli:main"]},
)
