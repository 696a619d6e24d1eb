"""Dump a PYPOWER case dict as MATPOWER .m text (all columns kept).

Usage: python tools/convert_pypower_case.py case14 > src/gridshield/data/case14.m
Needs the pypower package importable; only used to refresh the bundled files.
"""
import importlib
import sys


def fmt(v):
    f = float(v)
    return str(int(f)) if f.is_integer() else repr(f)


def main(name):
    mod = importlib.import_module(f"pypower.{name}")
    ppc = getattr(mod, name)()
    out = [
        f"function mpc = {name}",
        f"%{name.upper()}  Power flow data (MATPOWER format, PSERC BSD license).",
        "",
        "mpc.version = '2';",
        f"mpc.baseMVA = {fmt(ppc['baseMVA'])};",
    ]
    heads = {
        "bus": "bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin",
        "gen": "bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin ...",
        "branch": "fbus tbus r x b rateA rateB rateC ratio angle status angmin angmax",
    }
    for key in ("bus", "gen", "branch"):
        out += ["", f"%% {key} data", f"%\t{heads[key]}", f"mpc.{key} = ["]
        for row in ppc[key]:
            out.append("\t" + "\t".join(fmt(v) for v in row) + ";")
        out.append("];")
    print("\n".join(out))


if __name__ == "__main__":
    main(sys.argv[1])
