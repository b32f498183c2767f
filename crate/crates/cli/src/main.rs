fn main() {
    println!("duotrack");
}
