from setuptools import setup, find_packages

setup(
    name="deep-ppde",
    version="0.1.0",
    description="Deep learning backward scheme for path-dependent PDEs",
    python_requires=">=3.8",
    packages=find_packages(include=["deep_ppde*"]),
    install_requires=[
        "numpy>=1.22",
        "python-dotenv>=1.0",
    ],
    extras_require={
        "dev": [
            "pytest>=7.0",
        ],
    },
    entry_points={
        "console_scripts": ["deep-ppde=deep_ppde.cli:main"],
    },
    license="MIT",
    keywords=["ppde", "deep-learning", "monte-carlo", "option-pricing", "stochastic-control"],
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Topic :: Scientific/Engineering :: Mathematics",
    ],
)
