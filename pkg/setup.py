import os

import setuptools
from setuptools import setup


# Used for the long_description
def read(fname):
    return open(os.path.join(os.path.dirname(__file__), fname)).read()


setup(
    name="mia-disparity-reference",
    version="0.1",
    description=("Consistency, coverage and ensemble analysis of membership inference attacks."),
    license="Apache",
    packages=setuptools.find_packages(exclude=["tests"]),
    python_requires=">=3.8",
    install_requires=[
        "numpy>=1.20",
        "scipy>=1.7",
        "scikit-learn>=1.0",
        "PyYAML>=5.4",
        "aiosqlite>=0.17.0",
        "colorlog>=5.0",
        "concurrent-log-handler>=0.9.19",
    ],
    extras_require={"svg": ["matplotlib>=3.4"], "dev": ["pytest>=6.2.4"]},
    entry_points={"console_scripts": ["mia=mia.cli:main_entry"]},
    long_description=read("README.md"),
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Topic :: Scientific/Engineering",
        "License :: OSI Approved :: Apache Software License",
    ],
)
