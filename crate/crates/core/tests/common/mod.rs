#![allow(dead_code)]

use std::collections::BTreeMap;

use layer_inject::bench::inject_path;
use layer_inject::builder::{SimCosts, SimulatedBuilder};
use layer_inject::bundle::{flatten, FileTree, ImageBundle};
use layer_inject::dockerfile::{parse_dockerfile, DockerfileModel};
use layer_inject::injector::{InjectMode, InjectionReceipt};
use layer_inject::planner::{apply_deltas, FileDelta};

pub fn tree(files: &[(&str, &[u8])]) -> FileTree {
    let mut t = FileTree::new();
    for (p, c) in files {
        t.insert_file(p, c.to_vec()).unwrap();
    }
    t
}

pub fn builder() -> SimulatedBuilder {
    SimulatedBuilder {
        costs: SimCosts::NONE,
        seed: 7,
        dep_layer_size: 64 * 1024,
        repo_tag: "fixture:latest".into(),
    }
}

pub struct Fixture {
    pub name: &'static str,
    pub dockerfile: DockerfileModel,
    pub project: FileTree,
    pub change: Vec<FileDelta>,
    pub interpreted: bool,
}

impl Fixture {
    pub fn changed(&self) -> FileTree {
        let mut t = self.project.clone();
        apply_deltas(&mut t, &self.change).unwrap();
        t
    }

    pub fn image(&self) -> ImageBundle {
        builder().build(&self.dockerfile, &self.project).unwrap()
    }

    /// Image rebuilt from scratch against the changed sources.
    pub fn rebuilt(&self) -> ImageBundle {
        builder().build(&self.dockerfile, &self.changed()).unwrap()
    }

    pub fn injected(&self, image: &ImageBundle, mode: InjectMode) -> (ImageBundle, InjectionReceipt) {
        let (b, r) = inject_path(&builder(), image, &self.dockerfile, &self.dockerfile, &self.changed(), self.interpreted, mode)
            .unwrap();
        (b, r.expect("fixture change is injectable"))
    }
}

fn lines(range: std::ops::Range<usize>, f: impl Fn(usize) -> String) -> String {
    range.map(|i| f(i) + "\n").collect()
}

pub fn fixtures() -> Vec<Fixture> {
    let script = Fixture {
        name: "one-file script",
        dockerfile: parse_dockerfile("FROM python:3.12-alpine\nWORKDIR /app\nCOPY app.py .\nCMD [\"python\", \"app.py\"]").unwrap(),
        project: tree(&[("app.py", b"print('hello')\n")]),
        change: vec![FileDelta::modify("app.py", b"print('hello')\nprint('again')\n".to_vec())],
        interpreted: true,
    };

    let main = lines(0..300, |i| format!("def f{i}(x):\n    return x * {i}"));
    let appended = main.clone() + &lines(0..1000, |i| format!("print(f{}({i}))", i % 300));
    let mut project = tree(&[("main.py", main.as_bytes()), ("requirements.txt", b"flask\nrequests\n")]);
    for m in 0..6 {
        project.insert_file(&format!("pkg/mod{m}.py"), lines(0..40, |i| format!("C{i} = {m}")).into_bytes()).unwrap();
    }
    let multi = Fixture {
        name: "multi-file project, 1000 appended lines",
        dockerfile: parse_dockerfile(
            "FROM python:3.12-slim\nENV PYTHONUNBUFFERED=1\nWORKDIR /srv\nCOPY . .\nRUN pip install -r requirements.txt\nEXPOSE 8000\nCMD [\"python\", \"main.py\"]",
        )
        .unwrap(),
        project,
        change: vec![FileDelta::modify("main.py", appended.into_bytes())],
        interpreted: true,
    };

    let deletion = Fixture {
        name: "project with deletion",
        dockerfile: parse_dockerfile("FROM node:20\nWORKDIR /web\nCOPY src/ lib/\nRUN npm install\nCMD [\"node\", \"lib/index.js\"]").unwrap(),
        project: tree(&[
            ("src/index.js", b"require('./a');require('./b');\n"),
            ("src/a.js", b"module.exports = 1;\n"),
            ("src/b.js", b"module.exports = 2;\n"),
            ("README.md", b"not copied\n"),
        ]),
        change: vec![
            FileDelta::delete("src/b.js"),
            FileDelta::modify("src/index.js", b"require('./a');\n".to_vec()),
        ],
        interpreted: true,
    };

    let added = Fixture {
        name: "new module in a new directory",
        dockerfile: parse_dockerfile("FROM python:3.12\nCOPY . /opt/app\nRUN pip install gunicorn\nENTRYPOINT [\"gunicorn\"]").unwrap(),
        project: tree(&[("wsgi.py", b"app = None\n")]),
        change: vec![
            FileDelta::add("views/deep/home.py", b"def home(): pass\n".to_vec()),
            FileDelta::modify("wsgi.py", b"from views.deep.home import home\napp = home\n".to_vec()),
        ],
        interpreted: true,
    };

    let java = Fixture {
        name: "compiled java",
        dockerfile: parse_dockerfile(
            "FROM ubuntu:22.04\nRUN apt-get install -y openjdk-17-jdk\nWORKDIR /app\nCOPY src/ src/\nRUN javac src/Main.java\nCMD [\"java\", \"-cp\", \"src\", \"Main\"]",
        )
        .unwrap(),
        project: tree(&[("src/Main.java", b"class Main { public static void main(String[] a) {} }\n")]),
        change: vec![FileDelta::modify(
            "src/Main.java",
            b"class Main { public static void main(String[] a) { System.exit(0); } }\n".to_vec(),
        )],
        interpreted: false,
    };

    vec![script, multi, deletion, added, java]
}

/// path -> content of the image's top, directories excluded.
pub fn contents(bundle: &ImageBundle) -> BTreeMap<String, Vec<u8>> {
    flatten(bundle, bundle.layer_count() - 1)
        .unwrap()
        .contents()
        .into_iter()
        .map(|(p, c)| (p.to_string(), c.to_vec()))
        .collect()
}

/// Every JSON document of an archive (everything but layer payloads).
pub fn json_documents(archive: &[u8]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut ar = tar::Archive::new(archive);
    for e in ar.entries().unwrap() {
        let mut e = e.unwrap();
        let path = e.path().unwrap().to_string_lossy().into_owned();
        if !e.header().entry_type().is_file() || path.ends_with("layer.tar") || path.ends_with("VERSION") {
            continue;
        }
        let mut s = String::new();
        std::io::Read::read_to_string(&mut e, &mut s).unwrap();
        out.push((path, s));
    }
    out
}

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// A Dockerfile/context pair before and after a random edit.
pub struct MutationCase {
    pub old_df: DockerfileModel,
    pub new_df: DockerfileModel,
    pub image: ImageBundle,
    pub old_context: FileTree,
    pub new_context: FileTree,
    /// Whether the edit changes anything the image depends on.
    pub mutated: bool,
    pub description: Vec<String>,
}

fn random_bytes(rng: &mut StdRng, max: usize) -> Vec<u8> {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| rng.random_range(b' '..=b'~')).collect()
}

fn random_context(rng: &mut StdRng) -> FileTree {
    let mut t = FileTree::new();
    for i in 0..rng.random_range(2..=5) {
        let dir = ["", "pkg/", "pkg/sub/"][rng.random_range(0..3)];
        t.insert_file(&format!("src/{dir}f{i}.py"), random_bytes(rng, 200)).unwrap();
    }
    for i in 0..rng.random_range(0..=2) {
        t.insert_file(&format!("docs/n{i}.md"), random_bytes(rng, 50)).unwrap();
    }
    t
}

fn random_dockerfile(rng: &mut StdRng) -> Vec<String> {
    let mut lines = vec![format!("FROM base:{}", rng.random_range(1..4))];
    if rng.random_bool(0.5) {
        lines.push(format!("ENV MODE=m{}", rng.random_range(0..9)));
    }
    if rng.random_bool(0.5) {
        lines.push("WORKDIR /w".into());
    }
    if rng.random_bool(0.5) {
        lines.push(format!("RUN install-deps {}", rng.random_range(0..9)));
    }
    lines.push(if rng.random_bool(0.5) { "COPY . .".into() } else { "COPY src/ app/".into() });
    if rng.random_bool(0.5) {
        lines.push(format!("RUN post-step {}", rng.random_range(0..9)));
    }
    if rng.random_bool(0.3) {
        lines.push("LABEL tier=web".into());
    }
    lines.push("CMD [\"run\"]".into());
    lines
}

pub fn random_case(seed: u64) -> MutationCase {
    let mut rng = StdRng::seed_from_u64(seed);
    let old_lines = random_dockerfile(&mut rng);
    let old_context = random_context(&mut rng);
    let copies_all = old_lines.iter().any(|l| l == "COPY . .");
    let mut new_lines = old_lines.clone();
    let mut ctx = old_context.clone();
    let mut mutated = false;
    let mut description = Vec::new();

    let src_files: Vec<String> = ctx.paths().filter(|p| p.starts_with("src/")).cloned().collect();
    if rng.random_bool(0.35) {
        match rng.random_range(0..3) {
            0 => {
                let p = &src_files[rng.random_range(0..src_files.len())];
                let mut c = ctx.get(p).unwrap().content.clone();
                c.extend_from_slice(b"\n# edit\n");
                ctx.insert_file(p, c).unwrap();
                description.push(format!("modify {p}"));
            }
            1 => {
                ctx.insert_file("src/added.py", b"x = 1\n".to_vec()).unwrap();
                description.push("add src/added.py".into());
            }
            _ => {
                let p = &src_files[rng.random_range(0..src_files.len())];
                ctx.remove(p);
                description.push(format!("delete {p}"));
            }
        }
        mutated = true;
    }
    if rng.random_bool(0.2) {
        ctx.insert_file("docs/extra.md", b"notes\n".to_vec()).unwrap();
        description.push("add docs/extra.md".into());
        // only visible to the image when the whole context is copied
        mutated |= copies_all;
    }
    if rng.random_bool(0.2) {
        let editable: Vec<usize> = (1..new_lines.len())
            .filter(|&i| !new_lines[i].starts_with("COPY") && !new_lines[i].starts_with("WORKDIR"))
            .collect();
        let i = editable[rng.random_range(0..editable.len())];
        new_lines[i] = match new_lines[i].split_once(' ') {
            Some(("CMD", _)) => "CMD [\"run\", \"--fast\"]".into(),
            _ => format!("{} edited", new_lines[i]),
        };
        description.push(format!("edit line {}", i + 1));
        mutated = true;
    }
    if rng.random_bool(0.1) {
        if rng.random_bool(0.5) {
            new_lines.push("EXPOSE 8080".into());
            description.push("append EXPOSE".into());
        } else {
            new_lines.pop();
            description.push("drop last line".into());
        }
        mutated = true;
    }

    let old_df = parse_dockerfile(&old_lines.join("\n")).unwrap();
    let new_df = parse_dockerfile(&new_lines.join("\n")).unwrap();
    let image = builder().build(&old_df, &old_context).unwrap();
    MutationCase {
        old_df,
        new_df,
        image,
        old_context,
        new_context: ctx,
        mutated,
        description,
    }
}

/// A random builder-made image, sometimes with its JSON documents
/// re-formatted so they are not in the builder's compact layout.
pub fn random_image(seed: u64) -> ImageBundle {
    let mut rng = StdRng::seed_from_u64(seed ^ 0xb0b);
    let case = random_case(seed);
    let mut image = case.image;
    if rng.random_bool(0.5) {
        for doc in image.live_documents() {
            let v: serde_json::Value = serde_json::from_slice(image.document(&doc).unwrap()).unwrap();
            image.set_document(&doc, serde_json::to_vec_pretty(&v).unwrap()).unwrap();
        }
    }
    image
}
