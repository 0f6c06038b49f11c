from setuptools import setup, find_packages

setup(
    name="CardiacFCN",
    version="0.1",
    packages=find_packages(exclude=["examples", "examples.*"]),
    py_modules=["cli", "config"],
    install_requires=[
        "numpy",
        "scipy",
        "pillow",
        "pydantic>=1.8.0,<2.0.0",
        "pydicom>=2.3,<3",
        "python-dotenv>=0.19.0,<0.20.0",
        "tqdm",
        "typer",
    ],
    package_data={"fcn": ["architectures/*.arch"]},
    entry_points={"console_scripts": ["cardiac-fcn=cli:app"]},
)
